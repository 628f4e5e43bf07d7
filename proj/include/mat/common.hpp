#pragma once
// Shared plumbing: deterministic RNG, stable seed derivation, error types,
// and a small fixed-chunk thread pool. Everything here is platform-stable:
// identical seeds give identical streams on any conforming implementation,
// which std::mt19937 + std::*_distribution do not guarantee.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mat {

// ---------------------------------------------------------------- errors

struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& m) : std::runtime_error(m) {}
};
struct VersionError : std::runtime_error {
  explicit VersionError(const std::string& m) : std::runtime_error(m) {}
};
struct TruncationError : std::runtime_error {
  explicit TruncationError(const std::string& m) : std::runtime_error(m) {}
};
struct ChecksumError : std::runtime_error {
  explicit ChecksumError(const std::string& m) : std::runtime_error(m) {}
};
// Resume with a config that does not hash-match the checkpoint.
struct ConfigMismatchError : std::runtime_error {
  explicit ConfigMismatchError(const std::string& m) : std::runtime_error(m) {}
};
// Training aborted because a loss or gradient went non-finite.
struct NonFiniteError : std::runtime_error {
  explicit NonFiniteError(const std::string& m) : std::runtime_error(m) {}
};

// ---------------------------------------------------------------- hashing

constexpr uint64_t kFnvOffset = 1469598103934665603ull;
constexpr uint64_t kFnvPrime = 1099511628211ull;

inline uint64_t fnv1a(const void* data, size_t len, uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = kFnvOffset) {
  return fnv1a(s.data(), s.size(), h);
}

// splitmix64 finalizer; used both for seeding and for mixing derived seeds.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d4a2c479e1d63ull;
  return x ^ (x >> 31);
}

// Stable seed derivation: hash of (seed, tag, indices...). Every random
// decision in the project draws from a stream keyed this way, so adding or
// reordering unrelated draws cannot perturb an existing stream.
inline uint64_t derive_seed(uint64_t seed, std::string_view tag,
                            uint64_t a = 0, uint64_t b = 0, uint64_t c = 0) {
  uint64_t h = fnv1a(tag);
  h = mix64(h ^ mix64(seed));
  h = mix64(h ^ mix64(a * 0x9e3779b97f4a7c15ull + 1));
  h = mix64(h ^ mix64(b * 0xc2b2ae3d27d4eb4full + 2));
  h = mix64(h ^ mix64(c * 0x165667b19e3779f9ull + 3));
  return h;
}

// ---------------------------------------------------------------- rng

// xoshiro256++ seeded through splitmix64. Uniform doubles take the top 53
// bits; normals use Box-Muller with a cached spare.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s_) {
      x += 0x9e3779b97f4a7c15ull;
      w = mix64(x);
    }
    have_spare_ = false;
  }

  uint64_t next() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0,1).
  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Unbiased integer in [0, n). Lemire's multiply-shift with rejection.
  uint64_t below(uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    uint64_t x = next();
    __uint128_t m = static_cast<__uint128_t>(x) * n;
    uint64_t l = static_cast<uint64_t>(m);
    if (l < n) {
      uint64_t t = (0 - n) % n;
      while (l < t) {
        x = next();
        m = static_cast<__uint128_t>(x) * n;
        l = static_cast<uint64_t>(m);
      }
    }
    return static_cast<uint64_t>(m >> 64);
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // Box-Muller; u clamped away from 0 so log stays finite.
    double u = uniform01();
    if (u < 1e-300) u = 1e-300;
    double v = uniform01();
    double r = std::sqrt(-2.0 * std::log(u));
    double a = 6.283185307179586476925286766559 * v;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t s_[4]{};
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// ---------------------------------------------------------------- threads

// Fixed-order parallel map over [0, n). Work is split into one contiguous
// chunk per worker; each chunk's results land in caller-owned storage, so
// reductions stay in a fixed order and results do not depend on the worker
// count. Honors MAT_THREADS (default: hardware concurrency).
int worker_count();
void parallel_for(size_t n, const std::function<void(size_t, size_t)>& chunk);

}  // namespace mat
