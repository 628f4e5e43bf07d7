#include "mat/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <vector>

#include "mat/binio.hpp"
#include "mat/common.hpp"

namespace mat::gradcore {

namespace {

constexpr char kMagic[6] = {'M', 'A', 'T', 'C', 'K', '1'};
constexpr uint16_t kVersion = 1;

// Caps guard allocation when reading a corrupt file: a flipped byte in a
// count field must fail cleanly, not request petabytes.
constexpr uint32_t kMaxRank = 8;
constexpr uint64_t kMaxElems = 1ull << 30;

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointData& data) {
  binio::Writer w(path);
  w.bytes(kMagic, sizeof(kMagic));
  w.u16(kVersion);

  w.u32(static_cast<uint32_t>(data.tensors.size()));
  for (const auto& [name, t] : data.tensors) {
    if (!t.defined()) throw FormatError("checkpoint: undefined tensor " + name);
    w.str(name);
    w.u32(static_cast<uint32_t>(t.shape().size()));
    for (int64_t d : t.shape()) w.u64(static_cast<uint64_t>(d));
    w.f64_array(t.data(), static_cast<size_t>(t.numel()));
  }

  w.u32(static_cast<uint32_t>(data.adam.size()));
  for (const auto& [group, states] : data.adam) {
    w.str(group);
    w.u32(static_cast<uint32_t>(states.size()));
    for (const auto& [pname, st] : states) {
      if (st.m.size() != st.v.size())
        throw FormatError("checkpoint: ragged Adam state for " + pname);
      w.str(pname);
      w.u64(static_cast<uint64_t>(st.t));
      w.u64(st.m.size());
      w.f64_array(st.m.data(), st.m.size());
      w.f64_array(st.v.data(), st.v.size());
    }
  }

  w.finish_with_crc();
}

CheckpointData load_checkpoint(const std::string& path) {
  binio::Reader r(path);

  char magic[6];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw FormatError(path + ": not a checkpoint file (bad magic)");
  uint16_t version = r.u16();
  if (version != kVersion)
    throw VersionError(path + ": unsupported checkpoint version " +
                       std::to_string(version));

  CheckpointData out;

  uint32_t ntensors = r.u32();
  for (uint32_t i = 0; i < ntensors; ++i) {
    std::string name = r.str();
    uint32_t rank = r.u32();
    if (rank > kMaxRank)
      throw FormatError(path + ": implausible tensor rank for " + name);
    std::vector<int> shape(rank);
    uint64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      uint64_t dim = r.u64();
      if (dim == 0 || dim > kMaxElems || numel > kMaxElems / dim)
        throw FormatError(path + ": implausible tensor shape for " + name);
      shape[d] = static_cast<int>(dim);
      numel *= dim;
    }
    if (numel * sizeof(double) > r.remaining())
      throw TruncationError(path + ": tensor data truncated for " + name);
    std::vector<double> vals(numel);
    r.f64_array(vals.data(), vals.size());
    out.tensors.emplace(std::move(name), Tensor::from_data(shape, vals));
  }

  uint32_t ngroups = r.u32();
  for (uint32_t g = 0; g < ngroups; ++g) {
    std::string group = r.str();
    uint32_t nstates = r.u32();
    auto& states = out.adam[group];
    for (uint32_t s = 0; s < nstates; ++s) {
      std::string pname = r.str();
      AdamState st;
      st.t = static_cast<int64_t>(r.u64());
      uint64_t len = r.u64();
      if (len > kMaxElems || len * 2 * sizeof(double) > r.remaining())
        throw TruncationError(path + ": Adam state truncated for " + pname);
      st.m.resize(len);
      st.v.resize(len);
      r.f64_array(st.m.data(), len);
      r.f64_array(st.v.data(), len);
      states.emplace(std::move(pname), std::move(st));
    }
  }

  r.verify_trailing_crc();
  return out;
}

}  // namespace mat::gradcore
