#include "mat/sigkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "mat/binio.hpp"
#include "mat/common.hpp"

namespace mat::sigkit {

using nlohmann::json;

// --------------------------------------------------------------- profiles

EmitterProfile make_profile(int emitter_id, uint64_t master_seed,
                            double impairment_scale) {
  if (impairment_scale < 0.0)
    throw std::invalid_argument("make_profile: impairment_scale must be >= 0");
  Rng rng(derive_seed(master_seed, "profile", static_cast<uint64_t>(emitter_id)));
  EmitterProfile p;
  p.emitter_id = emitter_id;
  p.iq_gain_imbalance = 1.0 + impairment_scale * rng.uniform(-0.08, 0.08);
  p.iq_phase_skew = impairment_scale * rng.uniform(-0.12, 0.12);
  p.dc_offset_i = impairment_scale * rng.uniform(-0.06, 0.06);
  p.dc_offset_q = impairment_scale * rng.uniform(-0.06, 0.06);
  p.phase_noise_std = impairment_scale * rng.uniform(0.002, 0.012);
  p.pa_coeff3 = -impairment_scale * rng.uniform(0.02, 0.18);
  if (p.iq_gain_imbalance <= 0.0)
    throw std::invalid_argument(
        "make_profile: impairment_scale too large, gain imbalance must stay positive");
  return p;
}

// --------------------------------------------------------------- baseband

namespace {

// Root-raised-cosine impulse response sampled at kSamplesPerSymbol, unit
// energy, spanning kRrcSpanSymbols symbols each side of the peak.
std::vector<double> rrc_taps() {
  const double beta = kRrcRolloff;
  const int sps = kSamplesPerSymbol;
  const int n_taps = kRrcSpanSymbols * sps + 1;
  std::vector<double> h(n_taps);
  const double pi = std::numbers::pi;
  for (int i = 0; i < n_taps; ++i) {
    double tau = static_cast<double>(i - kRrcSpanSymbols * sps / 2) / sps;
    double v;
    if (std::fabs(tau) < 1e-12) {
      v = 1.0 - beta + 4.0 * beta / pi;
    } else if (std::fabs(std::fabs(tau) - 1.0 / (4.0 * beta)) < 1e-9) {
      v = beta / std::numbers::sqrt2 *
          ((1.0 + 2.0 / pi) * std::sin(pi / (4.0 * beta)) +
           (1.0 - 2.0 / pi) * std::cos(pi / (4.0 * beta)));
    } else {
      double num = std::sin(pi * tau * (1.0 - beta)) +
                   4.0 * beta * tau * std::cos(pi * tau * (1.0 + beta));
      double den = pi * tau * (1.0 - 16.0 * beta * beta * tau * tau);
      v = num / den;
    }
    h[i] = v;
  }
  double energy = 0.0;
  for (double v : h) energy += v * v;
  // Unit-energy taps give average output power 1/sps for unit-power
  // zero-stuffed symbols; the sqrt(sps) factor restores unit power.
  double scale = std::sqrt(static_cast<double>(sps) / energy);
  for (double& v : h) v *= scale;
  return h;
}

}  // namespace

std::vector<std::complex<double>> shaped_baseband(uint64_t payload_seed,
                                                  int n) {
  if (n < 1) throw std::invalid_argument("shaped_baseband: n must be >= 1");
  static const std::vector<double> taps = rrc_taps();
  const int sps = kSamplesPerSymbol;
  const int delay = static_cast<int>(taps.size() - 1) / 2;
  // enough symbols that every kept sample has full filter history
  const int n_up = n + static_cast<int>(taps.size());
  const int n_sym = (n_up + sps - 1) / sps;

  Rng rng(payload_seed);
  const double amp = 1.0 / std::numbers::sqrt2;
  std::vector<std::complex<double>> up(static_cast<size_t>(n_sym) * sps);
  for (int s = 0; s < n_sym; ++s) {
    uint64_t bits = rng.next();
    double re = (bits & 1) ? amp : -amp;
    double im = (bits & 2) ? amp : -amp;
    up[static_cast<size_t>(s) * sps] = {re, im};
  }

  std::vector<std::complex<double>> out(static_cast<size_t>(n));
  for (int t = 0; t < n; ++t) {
    int m = t + delay;  // aligned so t=0 sits at the filter's steady state
    std::complex<double> acc = 0.0;
    int k_lo = std::max(0, m - (n_sym * sps - 1));
    int k_hi = std::min(static_cast<int>(taps.size()) - 1, m);
    for (int k = k_lo; k <= k_hi; ++k) {
      const auto& u = up[static_cast<size_t>(m - k)];
      if (u.real() != 0.0 || u.imag() != 0.0) acc += taps[k] * u;
    }
    out[static_cast<size_t>(t)] = acc;
  }
  return out;
}

// ------------------------------------------------------------- synthesis

IQSignal synthesize_sample(const EmitterProfile& profile, int n, double snr_db,
                           uint64_t sample_seed, bool multipath) {
  if (std::isnan(snr_db) ||
      (std::isinf(snr_db) && snr_db < 0.0))
    throw std::invalid_argument("synthesize_sample: snr_db must be a number or +inf");
  if (n < 1) throw std::invalid_argument("synthesize_sample: n must be >= 1");

  auto s = shaped_baseband(derive_seed(sample_seed, "payload"), n);

  // IQ imbalance: Q branch sees gain error and phase skew.
  const double g = profile.iq_gain_imbalance;
  const double sk_sin = std::sin(profile.iq_phase_skew);
  const double sk_cos = std::cos(profile.iq_phase_skew);
  for (auto& v : s) {
    double i = v.real(), q = v.imag();
    v = {i, g * (i * sk_sin + q * sk_cos)};
  }

  // DC offsets.
  for (auto& v : s) v += std::complex<double>(profile.dc_offset_i, profile.dc_offset_q);

  // Phase-noise random walk.
  if (profile.phase_noise_std != 0.0) {
    Rng walk(derive_seed(sample_seed, "phase"));
    double theta = 0.0;
    for (auto& v : s) {
      theta += profile.phase_noise_std * walk.normal();
      v *= std::complex<double>(std::cos(theta), std::sin(theta));
    }
  }

  // Compressive cubic PA model.
  if (profile.pa_coeff3 != 0.0) {
    for (auto& v : s) {
      double p = std::norm(v);
      v *= (1.0 + profile.pa_coeff3 * p);
    }
  }

  // Optional mild multipath (fixed 3-tap FIR), off by default: the channel
  // is flat so the classifier keys on emitter hardware, not propagation.
  if (multipath) {
    static const std::complex<double> taps[3] = {
        {1.0, 0.0},
        std::polar(0.22, 0.7),
        std::polar(0.10, -1.3)};
    std::vector<std::complex<double>> y(s.size());
    for (size_t t = 0; t < s.size(); ++t) {
      std::complex<double> acc = 0.0;
      for (size_t k = 0; k < 3 && k <= t; ++k) acc += taps[k] * s[t - k];
      y[t] = acc;
    }
    s.swap(y);
  }

  // AWGN at the requested SNR relative to measured signal power.
  if (!std::isinf(snr_db)) {
    double power = 0.0;
    for (const auto& v : s) power += std::norm(v);
    power /= static_cast<double>(s.size());
    double noise_var = power * std::pow(10.0, -snr_db / 10.0);
    double sigma = std::sqrt(noise_var / 2.0);
    Rng noise(derive_seed(sample_seed, "noise"));
    for (auto& v : s)
      v += std::complex<double>(sigma * noise.normal(), sigma * noise.normal());
  }

  IQSignal sig;
  sig.snr_db = snr_db;
  sig.iq.resize(static_cast<size_t>(n) * 2);
  for (int t = 0; t < n; ++t) {
    sig.iq[static_cast<size_t>(t) * 2] = static_cast<float>(s[t].real());
    sig.iq[static_cast<size_t>(t) * 2 + 1] = static_cast<float>(s[t].imag());
  }
  return sig;
}

// ---------------------------------------------------------------- dataset

namespace {

void validate_config(const DatasetConfig& c) {
  if (c.num_classes < 2)
    throw std::invalid_argument("dataset: num_classes must be >= 2");
  if (c.sample_length < kSamplesPerSymbol)
    throw std::invalid_argument("dataset: sample_length too short");
  if (c.per_class_count < 1)
    throw std::invalid_argument("dataset: per_class_count must be >= 1");
  if (!(c.labeled_ratio > 0.0) || c.labeled_ratio > 1.0)
    throw std::invalid_argument("dataset: labeled_ratio must be in (0, 1]");
  if (c.validation_fraction < 0.0 || c.validation_fraction >= 1.0)
    throw std::invalid_argument("dataset: validation_fraction must be in [0, 1)");
  if (c.test_per_class < 0)
    throw std::invalid_argument("dataset: test_per_class must be >= 0");
}

}  // namespace

Dataset build_dataset(const DatasetConfig& config) {
  validate_config(config);
  const int K = config.num_classes;
  const int n = config.sample_length;
  const int per_class = config.per_class_count;
  const int total = K * per_class;
  const int labeled_total =
      static_cast<int>(std::llround(config.labeled_ratio * total));

  // Largest-remainder allocation would be overkill: equal class sizes mean
  // the labeled quota splits as base + 1 for the first `rem` classes in a
  // seeded random class order.
  int base = labeled_total / K, rem = labeled_total % K;
  if (base == 0)
    throw std::invalid_argument(
        "build_dataset: labeled_ratio leaves some class without labeled "
        "samples (stratification impossible)");
  std::vector<int> class_order(static_cast<size_t>(K));
  std::iota(class_order.begin(), class_order.end(), 0);
  {
    Rng r(derive_seed(config.master_seed, "strata"));
    r.shuffle(class_order);
  }
  std::vector<int> labeled_count(static_cast<size_t>(K), base);
  for (int i = 0; i < rem; ++i) labeled_count[static_cast<size_t>(class_order[i])] += 1;

  Dataset ds;
  ds.num_classes = K;
  ds.config = config;

  std::vector<EmitterProfile> profiles;
  profiles.reserve(static_cast<size_t>(K));
  for (int k = 0; k < K; ++k)
    profiles.push_back(make_profile(k, config.master_seed, config.impairment_scale));

  for (int k = 0; k < K; ++k) {
    // synthesize this class's training pool
    std::vector<IQSignal> pool;
    pool.reserve(static_cast<size_t>(per_class));
    for (int i = 0; i < per_class; ++i) {
      uint64_t seed = derive_seed(config.master_seed, "train",
                                  static_cast<uint64_t>(k),
                                  static_cast<uint64_t>(i));
      pool.push_back(synthesize_sample(profiles[static_cast<size_t>(k)], n,
                                       config.snr_db, seed, config.multipath));
    }

    // split: labeled selection first, then a validation share off its tail
    std::vector<int> idx(static_cast<size_t>(per_class));
    std::iota(idx.begin(), idx.end(), 0);
    Rng sel(derive_seed(config.master_seed, "select", static_cast<uint64_t>(k)));
    sel.shuffle(idx);

    int lk = std::min(labeled_count[static_cast<size_t>(k)], per_class);
    int vk = static_cast<int>(std::llround(config.validation_fraction * lk));
    if (vk >= lk) vk = lk - 1;  // keep at least one labeled training sample

    for (int i = 0; i < per_class; ++i) {
      IQSignal& sig = pool[static_cast<size_t>(idx[static_cast<size_t>(i)])];
      if (i < lk - vk) {
        sig.label = k;
        ds.labeled.push_back(std::move(sig));
      } else if (i < lk) {
        sig.label = k;
        ds.validation.push_back(std::move(sig));
      } else {
        sig.label.reset();
        ds.unlabeled.push_back(std::move(sig));
        ds.diagnostic_labels.push_back(k);
      }
    }

    for (int i = 0; i < config.test_per_class; ++i) {
      uint64_t seed = derive_seed(config.master_seed, "test",
                                  static_cast<uint64_t>(k),
                                  static_cast<uint64_t>(i));
      IQSignal sig = synthesize_sample(profiles[static_cast<size_t>(k)], n,
                                       config.snr_db, seed, config.multipath);
      sig.label = k;
      ds.test.push_back(std::move(sig));
    }
  }
  return ds;
}

void normalize_min_max(Dataset& ds) {
  if (ds.normalized)
    throw std::logic_error("normalize_min_max: dataset already normalized");
  if (ds.labeled.empty() && ds.unlabeled.empty())
    throw std::invalid_argument(
        "normalize_min_max: no labeled or unlabeled samples to fit on");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto* part : {&ds.labeled, &ds.unlabeled})
    for (const auto& sig : *part)
      for (float v : sig.iq) {
        lo = std::min(lo, static_cast<double>(v));
        hi = std::max(hi, static_cast<double>(v));
      }
  if (!(hi > lo))
    throw std::invalid_argument("normalize_min_max: constant-valued data");
  const double inv = 1.0 / (hi - lo);
  for (auto* part : {&ds.labeled, &ds.unlabeled, &ds.validation, &ds.test})
    for (auto& sig : *part)
      for (float& v : sig.iq)
        v = static_cast<float>((static_cast<double>(v) - lo) * inv);
  ds.normalized = true;
  ds.norm_min = lo;
  ds.norm_max = hi;
}

// -------------------------------------------------------------- file I/O

void to_json(json& j, const DatasetConfig& c) {
  j = json{{"num_classes", c.num_classes},
           {"sample_length", c.sample_length},
           {"per_class_count", c.per_class_count},
           {"labeled_ratio", c.labeled_ratio},
           {"validation_fraction", c.validation_fraction},
           {"test_per_class", c.test_per_class},
           {"snr_db", c.snr_db},
           {"impairment_scale", c.impairment_scale},
           {"multipath", c.multipath},
           {"master_seed", c.master_seed}};
}

void from_json(const json& j, DatasetConfig& c) {
  DatasetConfig d;
  c.num_classes = j.value("num_classes", d.num_classes);
  c.sample_length = j.value("sample_length", d.sample_length);
  c.per_class_count = j.value("per_class_count", d.per_class_count);
  c.labeled_ratio = j.value("labeled_ratio", d.labeled_ratio);
  c.validation_fraction = j.value("validation_fraction", d.validation_fraction);
  c.test_per_class = j.value("test_per_class", d.test_per_class);
  c.snr_db = j.value("snr_db", d.snr_db);
  c.impairment_scale = j.value("impairment_scale", d.impairment_scale);
  c.multipath = j.value("multipath", d.multipath);
  c.master_seed = j.value("master_seed", d.master_seed);
}

namespace {

constexpr char kMagic[6] = {'M', 'A', 'T', 'D', 'S', '1'};
constexpr uint16_t kDatasetVersion = 1;

void write_partition(binio::Writer& w, const std::vector<IQSignal>& part,
                     int n) {
  for (const auto& sig : part) {
    if (sig.length() != n)
      throw std::invalid_argument("save_dataset: inconsistent sample length");
    w.f32_array(sig.iq.data(), sig.iq.size());
  }
  for (const auto& sig : part)
    w.i32(sig.label ? static_cast<int32_t>(*sig.label) : -1);
}

void read_partition(binio::Reader& r, std::vector<IQSignal>& part,
                    uint32_t count, int n, double snr_db) {
  part.resize(count);
  for (auto& sig : part) {
    sig.iq.resize(static_cast<size_t>(n) * 2);
    r.f32_array(sig.iq.data(), sig.iq.size());
    sig.snr_db = snr_db;
  }
  for (auto& sig : part) {
    int32_t lab = r.i32();
    if (lab >= 0) sig.label = static_cast<int>(lab);
  }
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
  binio::Writer w(path);
  w.bytes(kMagic, sizeof(kMagic));
  w.u16(kDatasetVersion);
  w.u16(static_cast<uint16_t>(ds.num_classes));
  w.u32(static_cast<uint32_t>(ds.config.sample_length));
  w.u32(static_cast<uint32_t>(ds.labeled.size()));
  w.u32(static_cast<uint32_t>(ds.unlabeled.size()));
  w.u32(static_cast<uint32_t>(ds.validation.size()));
  w.u32(static_cast<uint32_t>(ds.test.size()));
  w.f64(ds.norm_min);
  w.f64(ds.norm_max);
  int n = ds.config.sample_length;
  write_partition(w, ds.labeled, n);
  write_partition(w, ds.unlabeled, n);
  write_partition(w, ds.validation, n);
  write_partition(w, ds.test, n);
  w.finish_with_crc();

  json meta;
  meta["config"] = ds.config;
  meta["normalized"] = ds.normalized;
  meta["diagnostic_labels"] = ds.diagnostic_labels;
  std::ofstream side(path + ".meta.json");
  if (!side) throw FormatError("cannot write sidecar for " + path);
  side << meta.dump(2) << "\n";
}

Dataset load_dataset(const std::string& path) {
  binio::Reader r(path);
  char magic[6];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0)
    throw FormatError(path + ": bad magic, not a dataset file");
  uint16_t version = r.u16();
  if (version != kDatasetVersion)
    throw VersionError(path + ": unsupported dataset version " +
                       std::to_string(version));
  Dataset ds;
  ds.num_classes = r.u16();
  uint32_t n = r.u32();
  uint32_t counts[4];
  for (auto& c : counts) c = r.u32();
  ds.norm_min = r.f64();
  ds.norm_max = r.f64();

  // header sanity before allocating: payload must actually fit
  uint64_t need = 0;
  for (uint32_t c : counts)
    need += static_cast<uint64_t>(c) * (static_cast<uint64_t>(n) * 2 * 4 + 4);
  if (need + 4 > r.remaining())
    throw TruncationError(path + ": header counts exceed file payload");

  ds.config.sample_length = static_cast<int>(n);
  ds.config.num_classes = ds.num_classes;

  // sidecar first so snr metadata can be attached while reading
  double snr_db = ds.config.snr_db;
  json meta;
  {
    std::ifstream side(path + ".meta.json");
    if (side) {
      side >> meta;
      if (meta.contains("config")) {
        ds.config = meta["config"].get<DatasetConfig>();
        snr_db = ds.config.snr_db;
      }
    }
  }

  read_partition(r, ds.labeled, counts[0], static_cast<int>(n), snr_db);
  read_partition(r, ds.unlabeled, counts[1], static_cast<int>(n), snr_db);
  read_partition(r, ds.validation, counts[2], static_cast<int>(n), snr_db);
  read_partition(r, ds.test, counts[3], static_cast<int>(n), snr_db);
  r.verify_trailing_crc();

  if (!meta.is_null()) {
    ds.normalized = meta.value("normalized", false);
    if (meta.contains("diagnostic_labels"))
      ds.diagnostic_labels = meta["diagnostic_labels"].get<std::vector<int>>();
  } else {
    ds.normalized = ds.norm_max > ds.norm_min;
  }
  return ds;
}

Dataset load_raw_iq(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw FormatError("cannot open manifest: " + manifest_path);
  json m;
  try {
    in >> m;
  } catch (const json::exception& e) {
    throw FormatError("manifest parse error: " + std::string(e.what()));
  }

  Dataset ds;
  ds.num_classes = m.at("num_classes").get<int>();
  int n = m.at("sample_length").get<int>();
  ds.config.num_classes = ds.num_classes;
  ds.config.sample_length = n;
  ds.config.snr_db = m.value("snr_db", 0.0);

  auto base_dir = [&]() -> std::string {
    auto pos = manifest_path.find_last_of('/');
    return pos == std::string::npos ? std::string()
                                    : manifest_path.substr(0, pos + 1);
  }();

  auto load_part = [&](const char* name, std::vector<IQSignal>& out,
                       bool labels_required) {
    if (!m.contains("partitions") || !m["partitions"].contains(name)) return;
    for (const auto& entry : m["partitions"][name]) {
      std::string file = entry.at("file").get<std::string>();
      if (!file.empty() && file[0] != '/') file = base_dir + file;
      int64_t offset = entry.value("offset", 0);
      std::ifstream f(file, std::ios::binary);
      if (!f) throw FormatError("manifest references missing file: " + file);
      f.seekg(offset * 2 * static_cast<int64_t>(sizeof(float)));
      IQSignal sig;
      sig.iq.resize(static_cast<size_t>(n) * 2);
      f.read(reinterpret_cast<char*>(sig.iq.data()),
             static_cast<std::streamsize>(sig.iq.size() * sizeof(float)));
      if (f.gcount() !=
          static_cast<std::streamsize>(sig.iq.size() * sizeof(float)))
        throw TruncationError(file + ": not enough samples at offset " +
                              std::to_string(offset));
      sig.snr_db = ds.config.snr_db;
      if (entry.contains("label")) {
        int lab = entry["label"].get<int>();
        if (lab < 0 || lab >= ds.num_classes)
          throw FormatError(file + ": label out of range");
        sig.label = lab;
      } else if (labels_required) {
        throw FormatError(std::string(name) + " partition entries need labels");
      }
      if (!labels_required) {
        // unlabeled partition: a label in the manifest is diagnostic only
        ds.diagnostic_labels.push_back(sig.label.value_or(-1));
        sig.label.reset();
      }
      out.push_back(std::move(sig));
    }
  };

  load_part("labeled", ds.labeled, true);
  load_part("unlabeled", ds.unlabeled, false);
  load_part("validation", ds.validation, true);
  load_part("test", ds.test, true);

  if (ds.labeled.empty())
    throw FormatError("manifest has no labeled samples");
  return ds;
}

gradcore::Tensor batch_tensor(const std::vector<IQSignal>& pool,
                              const std::vector<int>& rows) {
  if (rows.empty())
    throw std::invalid_argument("batch_tensor: empty row list");
  int n = pool.at(static_cast<size_t>(rows[0])).length();
  std::vector<double> out(rows.size() * 2 * static_cast<size_t>(n));
  for (size_t b = 0; b < rows.size(); ++b) {
    const IQSignal& s = pool.at(static_cast<size_t>(rows[b]));
    if (s.length() != n)
      throw std::invalid_argument("batch_tensor: mixed signal lengths");
    double* ip = out.data() + b * 2 * static_cast<size_t>(n);
    double* qp = ip + n;
    for (int j = 0; j < n; ++j) {
      ip[j] = s.iq[static_cast<size_t>(2 * j)];
      qp[j] = s.iq[static_cast<size_t>(2 * j + 1)];
    }
  }
  return gradcore::Tensor::from_data({static_cast<int>(rows.size()), 2, n},
                                     std::move(out));
}

}  // namespace mat::sigkit
