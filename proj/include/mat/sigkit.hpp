#pragma once
// Synthetic emitter corpus: RRC-shaped QPSK bursts distorted by a chain of
// per-emitter hardware impairments, plus dataset assembly, normalization,
// and a binary on-disk format.
//
// Every random draw is keyed by (master_seed, purpose tag, indices) through
// derive_seed, so partitions and per-sample payloads are reproducible and
// independent of generation order.

#include <complex>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mat/tensor.hpp"

namespace mat::sigkit {

// Pulse shaping / modulation constants.
inline constexpr int kSamplesPerSymbol = 4;
inline constexpr double kRrcRolloff = 0.35;
inline constexpr int kRrcSpanSymbols = 8;

// Fixed hardware signature of one emitter. Impairment magnitudes scale
// linearly with the `impairment_scale` passed at creation; scale 0 yields
// the ideal transmitter.
struct EmitterProfile {
  int emitter_id = 0;
  double iq_gain_imbalance = 1.0;  // Q-branch gain, must stay > 0
  double iq_phase_skew = 0.0;      // radians
  double dc_offset_i = 0.0;
  double dc_offset_q = 0.0;
  double phase_noise_std = 0.0;    // radians per sample, random-walk steps
  double pa_coeff3 = 0.0;          // cubic nonlinearity, <= 0 (compressive)
};

EmitterProfile make_profile(int emitter_id, uint64_t master_seed,
                            double impairment_scale);

// One complex baseband recording, stored as interleaved I/Q float32 to
// match the on-disk layout bit for bit.
struct IQSignal {
  std::vector<float> iq;  // length 2n, [I0, Q0, I1, Q1, ...]
  std::optional<int> label;
  double snr_db = 0.0;

  int length() const { return static_cast<int>(iq.size() / 2); }
};

// Unit-power RRC-shaped QPSK baseband of n samples, before impairments.
std::vector<std::complex<double>> shaped_baseband(uint64_t payload_seed, int n);

// Applies the full impairment chain of `profile` to a fresh payload and
// adds AWGN at snr_db. snr_db = +inf skips the noise stage; NaN or -inf is
// rejected. `noise_seed` keys both the payload content and the noise.
IQSignal synthesize_sample(const EmitterProfile& profile, int n, double snr_db,
                           uint64_t sample_seed, bool multipath = false);

struct DatasetConfig {
  int num_classes = 6;
  int sample_length = 512;
  int per_class_count = 100;   // training pool per class
  double labeled_ratio = 0.1;  // of the training pool
  double validation_fraction = 0.30;  // of the labeled subset
  int test_per_class = 50;
  double snr_db = 15.0;
  double impairment_scale = 1.0;
  bool multipath = false;
  uint64_t master_seed = 1;
};

void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

struct Dataset {
  std::vector<IQSignal> labeled;     // labels set
  std::vector<IQSignal> unlabeled;   // labels absent
  std::vector<IQSignal> validation;  // labels set
  std::vector<IQSignal> test;        // labels set
  // True class of each unlabeled sample, for diagnostics only; never
  // consulted by training code.
  std::vector<int> diagnostic_labels;
  int num_classes = 0;
  bool normalized = false;
  double norm_min = 0.0;
  double norm_max = 0.0;
  DatasetConfig config;
};

// Builds all four partitions. Stratified: labeled counts per class differ by
// at most one; throws if any class would get zero labeled samples. Test
// samples come from payload seeds disjoint from the training pool.
Dataset build_dataset(const DatasetConfig& config);

// Min-max normalization fitted on labeled + unlabeled values only, then
// applied to every partition: v -> (v - min) / (max - min). Throws if the
// fit partitions are empty or constant. Idempotence is not expected; calling
// twice is an error.
void normalize_min_max(Dataset& ds);

// Binary dataset container, with a JSON sidecar `<path>.meta.json` holding
// the generating config and diagnostic labels.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// Loads raw interleaved-f32 I/Q recordings listed in a JSON manifest into
// the same Dataset shape (see README for the manifest schema).
Dataset load_raw_iq(const std::string& manifest_path);

// [B,2,n] f64 plane tensor (plane 0 = I, plane 1 = Q) for the given rows of
// a signal pool; rows may repeat. All referenced signals must share one
// length.
gradcore::Tensor batch_tensor(const std::vector<IQSignal>& pool,
                              const std::vector<int>& rows);

}  // namespace mat::sigkit
