#include "mat/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "mat/checkpoint.hpp"
#include "mat/common.hpp"
#include "mat/ops.hpp"

namespace mat::trainer {

using gradcore::Tensor;

namespace {

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"iterations", c.iterations},
                     {"batch_size", c.batch_size},
                     {"lr_m", c.lr_m},
                     {"lr_a", c.lr_a},
                     {"metric", c.metric},
                     {"vat_enabled", c.vat_enabled},
                     {"unlabeled_enabled", c.unlabeled_enabled},
                     {"schedule", c.schedule},
                     {"tau", c.tau},
                     {"alpha", c.alpha},
                     {"delta", c.delta},
                     {"epsilon", c.epsilon},
                     {"xi", c.xi},
                     {"power_iters", c.power_iters},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.iterations = j.value("iterations", d.iterations);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr_m = j.value("lr_m", d.lr_m);
  c.lr_a = j.value("lr_a", d.lr_a);
  c.metric = j.value("metric", d.metric);
  c.vat_enabled = j.value("vat_enabled", d.vat_enabled);
  c.unlabeled_enabled = j.value("unlabeled_enabled", d.unlabeled_enabled);
  c.schedule = j.value("schedule", d.schedule);
  c.tau = j.value("tau", d.tau);
  c.alpha = j.value("alpha", d.alpha);
  c.delta = j.value("delta", d.delta);
  c.epsilon = j.value("epsilon", d.epsilon);
  c.xi = j.value("xi", d.xi);
  c.power_iters = j.value("power_iters", d.power_iters);
  c.seed = j.value("seed", d.seed);
}

void validate(const TrainConfig& c) {
  if (c.iterations < 1)
    throw std::invalid_argument("train config: iterations must be >= 1");
  if (c.batch_size < 2)
    throw std::invalid_argument("train config: batch_size must be >= 2");
  if (!(c.lr_m > 0.0))
    throw std::invalid_argument("train config: lr_m must be positive");
  if (c.metric != "center" && c.metric != "proxy_anchor" && c.metric != "none")
    throw std::invalid_argument("train config: unknown metric " + c.metric);
  if (c.schedule != "alternating" && c.schedule != "simultaneous")
    throw std::invalid_argument("train config: unknown schedule " + c.schedule);
  if (!(c.tau >= 0.0 && c.tau <= 1.0))
    throw std::invalid_argument("train config: tau must lie in [0, 1]");
  if (!(c.alpha > 0.0))
    throw std::invalid_argument("train config: alpha must be positive");
  if (!(c.delta >= 0.0))
    throw std::invalid_argument("train config: delta must be non-negative");
  if (!(c.epsilon > 0.0))
    throw std::invalid_argument("train config: epsilon must be positive");
  if (!(c.xi > 0.0))
    throw std::invalid_argument("train config: xi must be positive");
  if (c.power_iters < 1)
    throw std::invalid_argument("train config: power_iters must be >= 1");
}

double resolved_lr_a(const TrainConfig& c) {
  if (c.lr_a >= 0.0) return c.lr_a;
  return c.metric == "proxy_anchor" ? 0.05 : 0.001;
}

nlohmann::json experiment_json(const sigkit::DatasetConfig& dc,
                               const cvnet::ModelConfig& mc,
                               const TrainConfig& tc) {
  return nlohmann::json{{"dataset", dc}, {"model", mc}, {"train", tc}};
}

uint64_t experiment_hash(const sigkit::DatasetConfig& dc,
                         const cvnet::ModelConfig& mc, const TrainConfig& tc) {
  return fnv1a(experiment_json(dc, mc, tc).dump());
}

std::vector<BatchPair> make_epoch_batches(const sigkit::Dataset& ds,
                                          const TrainConfig& cfg, int64_t t) {
  const int L = static_cast<int>(ds.labeled.size());
  if (L == 0)
    throw std::invalid_argument("make_epoch_batches: no labeled samples");
  const int U =
      cfg.unlabeled_enabled ? static_cast<int>(ds.unlabeled.size()) : 0;
  const int bs = cfg.batch_size;
  const int longest = std::max(L, U);
  const int nbatch = (longest + bs - 1) / bs;

  std::vector<int> order_l(static_cast<size_t>(L));
  std::iota(order_l.begin(), order_l.end(), 0);
  Rng(derive_seed(cfg.seed, "shuffle_labeled", static_cast<uint64_t>(t)))
      .shuffle(order_l);
  std::vector<int> order_u(static_cast<size_t>(U));
  std::iota(order_u.begin(), order_u.end(), 0);
  if (U > 0)
    Rng(derive_seed(cfg.seed, "shuffle_unlabeled", static_cast<uint64_t>(t)))
        .shuffle(order_u);

  std::vector<BatchPair> out;
  out.reserve(static_cast<size_t>(nbatch));
  size_t cur_l = 0, cur_u = 0;  // cursors for a cycling (shorter) stream
  for (int b = 0; b < nbatch; ++b) {
    std::vector<int> rows_l;
    if (L == longest) {
      const int lo = b * bs, hi = std::min(L, lo + bs);
      rows_l.assign(order_l.begin() + lo, order_l.begin() + hi);
      // Batch statistics need two rows; pad a lone tail with a cycled sample.
      if (rows_l.size() == 1 && U == 0)
        rows_l.push_back(order_l[static_cast<size_t>((lo + 1) % L)]);
    } else {
      rows_l.reserve(static_cast<size_t>(bs));
      for (int i = 0; i < bs; ++i)
        rows_l.push_back(order_l[(cur_l + static_cast<size_t>(i)) %
                                 static_cast<size_t>(L)]);
      cur_l += static_cast<size_t>(bs);
    }

    BatchPair pair;
    pair.labeled = sigkit::batch_tensor(ds.labeled, rows_l);
    pair.labels.reserve(rows_l.size());
    for (int r : rows_l)
      pair.labels.push_back(ds.labeled[static_cast<size_t>(r)].label.value());

    if (U > 0) {
      std::vector<int> rows_u;
      if (U == longest) {
        const int lo = b * bs, hi = std::min(U, lo + bs);
        rows_u.assign(order_u.begin() + lo, order_u.begin() + hi);
      } else {
        rows_u.reserve(static_cast<size_t>(bs));
        for (int i = 0; i < bs; ++i)
          rows_u.push_back(order_u[(cur_u + static_cast<size_t>(i)) %
                                   static_cast<size_t>(U)]);
        cur_u += static_cast<size_t>(bs);
      }
      pair.unlabeled = sigkit::batch_tensor(ds.unlabeled, rows_u);
    }
    out.push_back(std::move(pair));
  }
  return out;
}

Tensor init_centers(cvnet::Network& net, const sigkit::Dataset& ds,
                    int num_classes) {
  const int D = net.feature_dim();
  Tensor centers = Tensor::zeros({num_classes, D}, true);
  centers.set_name("metric.centers");
  std::vector<double> counts(static_cast<size_t>(num_classes), 0.0);

  cvnet::FwdCtx ctx;
  ctx.training = false;
  ctx.update_stats = false;
  ctx.track_params = false;
  // Inference-mode rows are independent, so the chunk size only bounds the
  // working set; it never changes the result.
  const int chunk = 64;
  const int L = static_cast<int>(ds.labeled.size());
  for (int lo = 0; lo < L; lo += chunk) {
    const int hi = std::min(L, lo + chunk);
    std::vector<int> rows(static_cast<size_t>(hi - lo));
    std::iota(rows.begin(), rows.end(), lo);
    Tensor f = net.features(sigkit::batch_tensor(ds.labeled, rows), ctx);
    const auto& fv = f.values();
    for (int i = lo; i < hi; ++i) {
      const int y = ds.labeled[static_cast<size_t>(i)].label.value();
      counts[static_cast<size_t>(y)] += 1.0;
      for (int d = 0; d < D; ++d)
        centers.values()[static_cast<size_t>(y * D + d)] +=
            fv[static_cast<size_t>((i - lo) * D + d)];
    }
  }
  for (int k = 0; k < num_classes; ++k)
    if (counts[static_cast<size_t>(k)] > 0.0)
      for (int d = 0; d < D; ++d)
        centers.values()[static_cast<size_t>(k * D + d)] /=
            counts[static_cast<size_t>(k)];
  return centers;
}

nlohmann::json record_json(const IterationRecord& r) {
  nlohmann::json j{{"t", r.t},
                   {"branch", r.branch},
                   {"loss_terms", r.loss_terms},
                   {"sigma", r.sigma},
                   {"theta_a_hash", hex64(r.theta_a_hash)},
                   {"wall_ms", r.wall_ms}};
  if (r.val_acc >= 0.0)
    j["val_acc"] = r.val_acc;
  else
    j["val_acc"] = nullptr;
  if (r.pseudo_accept_rate >= 0.0)
    j["pseudo_accept_rate"] = r.pseudo_accept_rate;
  return j;
}

Trainer::Trainer(const sigkit::Dataset& ds, const cvnet::ModelConfig& mc,
                 const TrainConfig& tc)
    : ds_(ds),
      mcfg_(mc),
      cfg_(tc),
      net_(mc),
      opt_m_(gradcore::AdamConfig{tc.lr_m, 0.9, 0.999, 1e-8}),
      opt_a_(gradcore::AdamConfig{resolved_lr_a(tc), 0.9, 0.999, 1e-8}) {
  validate(cfg_);
  if (ds_.labeled.empty())
    throw std::invalid_argument("trainer: dataset has no labeled samples");
  if (!ds_.normalized)
    throw std::invalid_argument("trainer: dataset must be normalized");
  if (ds_.num_classes != mcfg_.num_classes)
    throw std::invalid_argument(
        "trainer: dataset and model class counts disagree");
  cfg_hash_ = experiment_hash(ds_.config, mcfg_, cfg_);

  // One probe forward binds the lazy dense stack so the feature width, the
  // parameter list, and checkpoint contents are all fixed from here on.
  cvnet::FwdCtx probe_ctx;
  probe_ctx.training = false;
  probe_ctx.update_stats = false;
  probe_ctx.track_params = false;
  Tensor probe = Tensor::zeros({1, 2, ds_.labeled[0].length()});
  net_.logits(probe, probe_ctx);
  const int D = net_.feature_dim();

  if (cfg_.metric == "center") {
    metric_ = init_centers(net_, ds_, mcfg_.num_classes);
  } else if (cfg_.metric == "proxy_anchor") {
    metric_ = Tensor::zeros({mcfg_.num_classes, D}, true);
    metric_.set_name("metric.proxies");
    Rng rng(derive_seed(cfg_.seed, "proxy_init"));
    const double bound = 1.0 / std::sqrt(static_cast<double>(D));
    for (auto& v : metric_.values()) v = rng.uniform(-bound, bound);
  }

  // Log-weights start at 0 (unit sigma). Only branches that actually mix
  // terms get a weight vector; single-term objectives skip weighting.
  if (cfg_.schedule == "alternating") {
    if (cfg_.vat_enabled) {
      rho_vat_ = Tensor::zeros({2}, true);
      rho_vat_.set_name("weights.vat.rho");
    }
    if (metric_.defined()) {
      rho_ssml_ = Tensor::zeros({2}, true);
      rho_ssml_.set_name("weights.ssml.rho");
    }
  } else {
    const int nterms =
        1 + (cfg_.vat_enabled ? 1 : 0) + (metric_.defined() ? 1 : 0);
    if (nterms > 1) {
      rho_sim_ = Tensor::zeros({nterms}, true);
      rho_sim_.set_name("weights.sim.rho");
    }
  }
}

Trainer::Branch Trainer::branch_for(int64_t t) const {
  if (cfg_.schedule == "simultaneous") return Branch::kSim;
  return (t % 2 == 1) ? Branch::kVat : Branch::kSsml;
}

const char* Trainer::branch_name(Branch b) const {
  switch (b) {
    case Branch::kVat:
      return "vat";
    case Branch::kSsml:
      return "ssml";
    default:
      return "sim";
  }
}

std::vector<std::string> Trainer::term_names(Branch b) const {
  std::vector<std::string> names;
  names.push_back(cfg_.unlabeled_enabled && !ds_.unlabeled.empty() ? "ss_ce"
                                                                   : "ce");
  if (cfg_.vat_enabled && b != Branch::kSsml) names.emplace_back("vat");
  if (metric_.defined() && b != Branch::kVat) names.emplace_back("ssml");
  return names;
}

gradcore::Tensor& Trainer::branch_rho(Branch b) {
  switch (b) {
    case Branch::kVat:
      return rho_vat_;
    case Branch::kSsml:
      return rho_ssml_;
    default:
      return rho_sim_;
  }
}

losses::LogitFn Trainer::perturbation_fn() {
  return [this](const Tensor& x, bool track) {
    cvnet::FwdCtx c;
    c.training = true;
    c.update_stats = false;  // probe forwards must not disturb the BN buffers
    c.track_params = track;
    return net_.logits(x, c);
  };
}

Trainer::StepOut Trainer::step(const BatchPair& pair, Branch branch, int64_t t,
                               int b) {
  using namespace gradcore;
  const int Bl = pair.labeled.dim(0);
  const bool with_u = pair.unlabeled.defined() && pair.unlabeled.dim(0) > 0;
  const int Bu = with_u ? pair.unlabeled.dim(0) : 0;

  cvnet::FwdCtx ctx;  // training forward: batch stats, buffers updated
  Tensor x_all =
      with_u ? concat_rows(pair.labeled, pair.unlabeled) : pair.labeled;
  Tensor f_all = net_.features(x_all, ctx);
  Tensor logits_all = net_.logits_from_features(f_all, ctx);
  Tensor logits_l = with_u ? slice_rows(logits_all, 0, Bl) : logits_all;

  losses::PseudoLabels pseudo;
  Tensor logits_u;
  if (with_u) {
    logits_u = slice_rows(logits_all, Bl, Bl + Bu);
    pseudo = losses::compute_pseudo_labels(logits_u, cfg_.tau);
  }

  std::vector<Tensor> terms;
  std::vector<std::string> names = term_names(branch);
  if (with_u)
    terms.push_back(
        losses::ss_ce_loss(logits_l, pair.labels, logits_u, pseudo));
  else
    terms.push_back(losses::ce_loss(logits_l, pair.labels));

  if (cfg_.vat_enabled && branch != Branch::kSsml) {
    Tensor q0 = softmax(logits_all).detach();
    losses::LogitFn fn = perturbation_fn();
    Rng rng(derive_seed(cfg_.seed, "vat", static_cast<uint64_t>(t),
                        static_cast<uint64_t>(b)));
    Tensor pert = losses::vat_perturbation(fn, x_all, cfg_.epsilon, cfg_.xi,
                                           cfg_.power_iters, rng, q0);
    terms.push_back(losses::lds(fn, x_all, pert, q0));
  }

  const bool ssml_term = metric_.defined() && branch != Branch::kVat;
  if (ssml_term) {
    Tensor f_l = with_u ? slice_rows(f_all, 0, Bl) : f_all;
    Tensor m;
    if (with_u) {
      Tensor f_u = slice_rows(f_all, Bl, Bl + Bu);
      m = cfg_.metric == "center"
              ? losses::ss_center_loss(f_l, pair.labels, f_u, pseudo, metric_)
              : losses::ss_proxy_anchor_loss(f_l, pair.labels, f_u, pseudo,
                                             metric_, cfg_.alpha, cfg_.delta);
    } else {
      m = cfg_.metric == "center"
              ? losses::center_loss(f_l, pair.labels, metric_)
              : losses::proxy_anchor_loss(f_l, pair.labels, metric_,
                                          cfg_.alpha, cfg_.delta);
    }
    terms.push_back(m);
  }

  Tensor& rho = branch_rho(branch);
  Tensor objective =
      terms.size() == 1 ? terms[0] : losses::auto_weighted_sum(terms, rho);

  StepOut out;
  for (size_t i = 0; i < terms.size(); ++i) {
    const double v = terms[i].item();
    if (!std::isfinite(v))
      throw NonFiniteError("loss term " + names[i] + " is non-finite");
    out.terms[names[i]] = v;
  }
  const double ov = objective.item();
  if (!std::isfinite(ov))
    throw NonFiniteError("combined objective is non-finite");
  out.terms["objective"] = ov;
  if (with_u) {
    out.accepted = pseudo.accepted_count();
    out.unlabeled = Bu;
  }

  std::vector<Tensor> group_m = net_.parameters();
  if (terms.size() > 1) group_m.push_back(rho);
  for (auto& p : group_m) p.zero_grad();
  if (ssml_term) metric_.zero_grad();
  gradcore::backward(objective);
  opt_m_.step(group_m);
  if (ssml_term) opt_a_.step(metric_);
  return out;
}

IterationRecord Trainer::iterate() {
  const int64_t t = next_t_;
  if (t > cfg_.iterations)
    throw std::logic_error("iterate: training already finished");
  const auto start = std::chrono::steady_clock::now();
  const Branch br = branch_for(t);
  auto pairs = make_epoch_batches(ds_, cfg_, t);

  std::map<std::string, double> sums;
  double acc_n = 0.0, acc_d = 0.0;
  for (size_t b = 0; b < pairs.size(); ++b) {
    StepOut so;
    try {
      so = step(pairs[b], br, t, static_cast<int>(b));
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("iteration " + std::to_string(t) + " branch " +
                           branch_name(br) + " batch " + std::to_string(b) +
                           ": " + e.what());
    }
    for (const auto& [k, v] : so.terms) sums[k] += v;
    acc_n += so.accepted;
    acc_d += so.unlabeled;
  }

  IterationRecord rec;
  rec.t = t;
  rec.branch = branch_name(br);
  for (const auto& [k, v] : sums)
    rec.loss_terms[k] = v / static_cast<double>(pairs.size());
  const Tensor& rho = branch_rho(br);
  if (rho.defined()) {
    const auto names = term_names(br);
    for (size_t i = 0; i < names.size(); ++i)
      rec.sigma[names[i]] = std::exp(rho.values()[i]);
  }
  rec.val_acc = validation_accuracy();
  rec.pseudo_accept_rate = acc_d > 0.0 ? acc_n / acc_d : -1.0;
  rec.theta_a_hash = theta_a_hash();
  if (rec.val_acc > best_val_) {
    best_val_ = rec.val_acc;
    best_t_ = t;
  }
  ++next_t_;
  rec.wall_ms = std::chrono::duration<double, std::milli>(
                    std::chrono::steady_clock::now() - start)
                    .count();
  return rec;
}

std::vector<IterationRecord> Trainer::run(const Paths& paths,
                                          int64_t stop_after) {
  std::ofstream rep;
  if (!paths.report.empty()) {
    const bool fresh = next_t_ == 1;
    rep.open(paths.report, fresh ? std::ios::trunc : std::ios::app);
    if (!rep) throw FormatError("cannot open report file: " + paths.report);
    if (fresh) {
      nlohmann::json hdr{
          {"experiment", experiment_json(ds_.config, mcfg_, cfg_)},
          {"config_hash", hex64(cfg_hash_)}};
      rep << hdr.dump() << "\n";
    }
  }

  std::vector<IterationRecord> out;
  while (next_t_ <= cfg_.iterations &&
         (stop_after <= 0 || next_t_ <= stop_after)) {
    IterationRecord rec = iterate();
    if (rep.is_open()) {
      rep << record_json(rec).dump() << "\n";
      rep.flush();
    }
    if (!paths.last_ckpt.empty()) save(paths.last_ckpt);
    if (best_t_ == rec.t && !paths.best_ckpt.empty()) save(paths.best_ckpt);
    out.push_back(std::move(rec));
  }
  return out;
}

double Trainer::validation_accuracy() {
  if (ds_.validation.empty()) return -1.0;
  cvnet::FwdCtx ctx;
  ctx.training = false;
  ctx.update_stats = false;
  ctx.track_params = false;
  const int n = static_cast<int>(ds_.validation.size());
  int correct = 0;
  for (int lo = 0; lo < n; lo += 64) {
    const int hi = std::min(n, lo + 64);
    std::vector<int> rows(static_cast<size_t>(hi - lo));
    std::iota(rows.begin(), rows.end(), lo);
    Tensor lg = net_.logits(sigkit::batch_tensor(ds_.validation, rows), ctx);
    const int K = lg.dim(1);
    for (int i = 0; i < hi - lo; ++i) {
      const double* row = lg.data() + static_cast<size_t>(i) * K;
      int arg = 0;
      for (int k = 1; k < K; ++k)
        if (row[k] > row[arg]) arg = k;
      if (arg == ds_.validation[static_cast<size_t>(lo + i)].label.value())
        ++correct;
    }
  }
  return static_cast<double>(correct) / n;
}

uint64_t Trainer::theta_a_hash() const {
  if (!metric_.defined()) return kFnvOffset;
  const auto& v = metric_.values();
  return fnv1a(v.data(), v.size() * sizeof(double));
}

void Trainer::save(const std::string& path) {
  gradcore::CheckpointData d;
  for (auto& p : net_.parameters()) d.tensors.emplace(p.name(), p);
  for (auto& p : net_.running_buffers()) d.tensors.emplace(p.name(), p);
  if (metric_.defined()) d.tensors.emplace(metric_.name(), metric_);
  for (Tensor* r : {&rho_vat_, &rho_ssml_, &rho_sim_})
    if (r->defined()) d.tensors.emplace(r->name(), *r);
  d.adam["theta_m"] = opt_m_.states();
  d.adam["theta_a"] = opt_a_.states();
  gradcore::save_checkpoint(path, d);

  nlohmann::json meta{{"experiment", experiment_json(ds_.config, mcfg_, cfg_)},
                      {"config_hash", hex64(cfg_hash_)},
                      {"iteration", next_t_ - 1},
                      {"best_val_acc", best_val_},
                      {"best_iteration", best_t_}};
  std::ofstream out(path + ".meta.json");
  if (!out) throw FormatError("cannot write checkpoint sidecar for " + path);
  out << meta.dump(2) << "\n";
  out.close();
  if (!out) throw FormatError("checkpoint sidecar write failed for " + path);
}

void Trainer::restore(const std::string& path) {
  std::ifstream in(path + ".meta.json");
  if (!in)
    throw FormatError("missing checkpoint sidecar: " + path + ".meta.json");
  nlohmann::json meta = nlohmann::json::parse(in);
  const std::string want = hex64(cfg_hash_);
  const std::string got = meta.value("config_hash", std::string());
  if (got != want)
    throw ConfigMismatchError("checkpoint config hash " + got +
                              " does not match the trainer's " + want);

  auto d = gradcore::load_checkpoint(path);
  net_.load_state(d.tensors);
  auto restore_aux = [&](Tensor& tns) {
    if (!tns.defined()) return;
    auto it = d.tensors.find(tns.name());
    if (it == d.tensors.end())
      throw FormatError("checkpoint is missing " + tns.name());
    if (it->second.shape() != tns.shape())
      throw FormatError("checkpoint shape mismatch for " + tns.name());
    tns.values() = it->second.values();
  };
  restore_aux(metric_);
  restore_aux(rho_vat_);
  restore_aux(rho_ssml_);
  restore_aux(rho_sim_);

  auto take_states = [&](const char* group) {
    auto it = d.adam.find(group);
    return it == d.adam.end() ? std::map<std::string, gradcore::AdamState>{}
                              : it->second;
  };
  opt_m_.states() = take_states("theta_m");
  opt_a_.states() = take_states("theta_a");

  next_t_ = meta.value("iteration", int64_t{0}) + 1;
  best_val_ = meta.value("best_val_acc", -1.0);
  best_t_ = meta.value("best_iteration", int64_t{0});
}

}  // namespace mat::trainer
