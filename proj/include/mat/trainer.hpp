#pragma once
// Training loop for the semi-supervised emitter classifier. One iteration is
// a full pass over the epoch's batch pairs; under the alternating schedule
// odd iterations optimize cross-entropy + adversarial smoothness (network
// parameters only) and even iterations optimize cross-entropy + the metric
// term (network and metric parameters), while the simultaneous schedule folds
// every enabled term into a single step. Multi-term objectives are combined
// with learned uncertainty weights; single-term objectives skip weighting.
//
// All randomness is derived from (seed, purpose, t, b), so resuming from a
// checkpoint replays the exact batch order and perturbation draws of an
// uninterrupted run.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mat/adam.hpp"
#include "mat/cvnet.hpp"
#include "mat/losses.hpp"
#include "mat/sigkit.hpp"
#include "mat/tensor.hpp"

namespace mat::trainer {

struct TrainConfig {
  int iterations = 300;
  int batch_size = 32;
  double lr_m = 1e-3;
  // Negative means "resolve by metric": 0.001 for center, 0.05 for
  // proxy_anchor (see resolved_lr_a).
  double lr_a = -1.0;
  std::string metric = "center";  // center | proxy_anchor | none
  bool vat_enabled = true;
  bool unlabeled_enabled = true;
  std::string schedule = "alternating";  // alternating | simultaneous
  double tau = 0.95;
  double alpha = 32.0;   // proxy-anchor scaling
  double delta = 0.1;    // proxy-anchor margin
  double epsilon = 1.0;  // adversarial perturbation radius
  double xi = 1e-6;      // power-iteration probe scale
  int power_iters = 1;
  uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Throws std::invalid_argument on out-of-range fields or unknown names.
void validate(const TrainConfig& c);

double resolved_lr_a(const TrainConfig& c);

// The full experiment description ({"dataset", "model", "train"}) and the
// FNV-1a hash of its canonical dump. The hash is embedded in reports and
// checkpoints; resume refuses a mismatch.
nlohmann::json experiment_json(const sigkit::DatasetConfig& dc,
                               const cvnet::ModelConfig& mc,
                               const TrainConfig& tc);
uint64_t experiment_hash(const sigkit::DatasetConfig& dc,
                         const cvnet::ModelConfig& mc, const TrainConfig& tc);

struct BatchPair {
  gradcore::Tensor labeled;  // [B_l, 2, n]
  std::vector<int> labels;
  gradcore::Tensor unlabeled;  // undefined when absent
};

// Batch plan for iteration t: both streams shuffled with seeds derived from
// (seed, t); the longer stream is chunked, the shorter cycles so every pair
// has both halves. Batch count = ceil(max(L, U)/batch_size) with U = 0 when
// unlabeled training is disabled. A size-1 labeled chunk with no unlabeled
// half is padded with one cycled sample (batch statistics need two rows).
std::vector<BatchPair> make_epoch_batches(const sigkit::Dataset& ds,
                                          const TrainConfig& cfg, int64_t t);

// Class centers seeded at the per-class means of the untrained network's
// labeled features (inference-mode forward). Starting the centers inside the
// feature cloud makes the center loss pull same-class features together from
// step one; zero-started centers with a small metric learning rate would act
// as plain norm shrinkage instead. Rows for classes with no labeled sample
// stay zero. Named "metric.centers", requires_grad set.
gradcore::Tensor init_centers(cvnet::Network& net, const sigkit::Dataset& ds,
                              int num_classes);

struct IterationRecord {
  int64_t t = 0;
  std::string branch;  // "vat" | "ssml" | "sim"
  std::map<std::string, double> loss_terms;  // epoch means, keyed by term
  std::map<std::string, double> sigma;       // learned weights, empty if unused
  double val_acc = -1.0;             // -1 when the validation split is empty
  double pseudo_accept_rate = -1.0;  // -1 when no unlabeled samples were seen
  uint64_t theta_a_hash = 0;         // FNV-1a over metric parameter bytes
  double wall_ms = 0.0;
};

// One report line. wall_ms is the only field expected to differ between
// reruns of the same seed.
nlohmann::json record_json(const IterationRecord& r);

class Trainer {
 public:
  // The dataset is held by reference and must stay alive and unmodified for
  // the trainer's lifetime. It must be normalized, its class count must match
  // the model's, and its signals must be long enough for the conv stack.
  Trainer(const sigkit::Dataset& ds, const cvnet::ModelConfig& mc,
          const TrainConfig& tc);

  struct Paths {
    std::string report;     // JSONL: header line, then one line per iteration
    std::string last_ckpt;  // rewritten every iteration
    std::string best_ckpt;  // rewritten when validation accuracy improves
  };

  // Runs iterations next_iteration()..T and returns their records. Empty
  // path fields disable the corresponding output. Resuming past T is a
  // no-op returning no records. stop_after > 0 pauses once that iteration
  // completes (checkpoints and report lines are still written), leaving the
  // trainer resumable.
  std::vector<IterationRecord> run(const Paths& paths = {},
                                   int64_t stop_after = 0);

  // Runs a single iteration. Throws NonFiniteError (with iteration, branch,
  // and term context) when a loss or gradient leaves the finite range.
  IterationRecord iterate();

  // Accuracy on the validation split in eval mode; -1 when the split is
  // empty. Argmax ties resolve to the lowest class index.
  double validation_accuracy();

  // Checkpoint I/O: binary parameter/optimizer file at `path` plus a JSON
  // sidecar `<path>.meta.json` with the experiment config, hash, and
  // progress. restore() throws ConfigMismatchError when the checkpoint's
  // config hash differs from this trainer's.
  void save(const std::string& path);
  void restore(const std::string& path);

  cvnet::Network& network() { return net_; }
  const gradcore::Tensor& metric_params() const { return metric_; }
  int64_t next_iteration() const { return next_t_; }
  double best_val() const { return best_val_; }
  int64_t best_iteration() const { return best_t_; }
  uint64_t config_hash() const { return cfg_hash_; }
  uint64_t theta_a_hash() const;

 private:
  enum class Branch { kVat, kSsml, kSim };

  struct StepOut {
    std::map<std::string, double> terms;
    double accepted = 0.0;
    double unlabeled = 0.0;
  };

  Branch branch_for(int64_t t) const;
  const char* branch_name(Branch b) const;
  // Term keys in objective order: ce|ss_ce, then vat, then ssml as enabled.
  std::vector<std::string> term_names(Branch b) const;
  gradcore::Tensor& branch_rho(Branch b);
  losses::LogitFn perturbation_fn();
  StepOut step(const BatchPair& pair, Branch branch, int64_t t, int b);

  const sigkit::Dataset& ds_;
  cvnet::ModelConfig mcfg_;
  TrainConfig cfg_;
  uint64_t cfg_hash_ = 0;
  cvnet::Network net_;
  gradcore::Tensor metric_;  // undefined when metric = none
  // Learned log-weights, one tensor per schedule branch that mixes terms.
  gradcore::Tensor rho_vat_, rho_ssml_, rho_sim_;
  gradcore::Adam opt_m_, opt_a_;
  int64_t next_t_ = 1;
  double best_val_ = -1.0;
  int64_t best_t_ = 0;
};

}  // namespace mat::trainer
