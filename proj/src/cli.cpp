#include "mat/cli.hpp"

#include <sys/wait.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mat/checkpoint.hpp"
#include "mat/common.hpp"
#include "mat/cvnet.hpp"
#include "mat/evalkit.hpp"
#include "mat/sigkit.hpp"
#include "mat/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mat::cli {
namespace {

// Thrown by command bodies when the exit code is already decided.
struct ExitError {
  int code;
  std::string message;
};

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmtg(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ExitError{kExitIo, "cannot open " + path};
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ExitError{kExitConfig, path + ": " + e.what()};
  }
}

void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream out(path);
  if (!out) throw ExitError{kExitIo, "cannot write " + path};
  out << body;
  out.close();
  if (!out) throw ExitError{kExitIo, "write failed: " + path};
}

void make_dirs(const std::string& path) {
  std::error_code ec;
  fs::create_directories(path, ec);
  if (ec) throw ExitError{kExitIo, "cannot create " + path + ": " + ec.message()};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string canonical_metric(const std::string& m) {
  if (m == "pa" || m == "proxy-anchor") return "proxy_anchor";
  return m;
}

std::string canonical_schedule(const std::string& s) {
  if (s == "alt") return "alternating";
  if (s == "sim") return "simultaneous";
  return s;
}

// Row label used by grid tables and report pivots: the training variant
// independent of labeled ratio and seed.
std::string method_label(const std::string& metric, const std::string& schedule,
                         bool vat, bool unlabeled) {
  if (!vat && metric == "none") return "supervised_ce";
  std::string label = schedule == "alternating" ? "alt" : "sim";
  if (vat) label += "+vat";
  if (metric != "none") label += "+" + metric;
  if (!unlabeled) label += "-nounl";
  return label;
}

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'')
      out += "'\\''";
    else
      out += c;
  }
  out += "'";
  return out;
}

// Runs one child command line; returns the child's exit code (or 128+signal).
int run_child(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  if (rc == -1) return -1;
  if (WIFEXITED(rc)) return WEXITSTATUS(rc);
  if (WIFSIGNALED(rc)) return 128 + WTERMSIG(rc);
  return -1;
}

void emit_final(std::ostream& out, const json& j) { out << j.dump() << "\n"; }

// ---------------------------------------------------------------------------
// Config composition: defaults -> config file -> single-seed fan-out for any
// seed the file left unset -> explicit flags (applied by the caller).

void compose_configs(const json* file, uint64_t master,
                     sigkit::DatasetConfig& dc, cvnet::ModelConfig& mc,
                     trainer::TrainConfig& tc) {
  bool ds_seed = false, model_seed = false, train_seed = false;
  if (file) {
    if (file->contains("dataset")) {
      dc = file->at("dataset").get<sigkit::DatasetConfig>();
      ds_seed = file->at("dataset").contains("master_seed");
    }
    if (file->contains("model")) {
      mc = file->at("model").get<cvnet::ModelConfig>();
      model_seed = file->at("model").contains("init_seed");
    }
    if (file->contains("train")) {
      tc = file->at("train").get<trainer::TrainConfig>();
      train_seed = file->at("train").contains("seed");
    }
  }
  if (!ds_seed) dc.master_seed = derive_seed(master, "dataset");
  if (!model_seed) mc.init_seed = derive_seed(master, "model");
  if (!train_seed) tc.seed = derive_seed(master, "train");
}

// ---------------------------------------------------------------------------
// Shared dataset-generation flags (gen, and train without --dataset).

struct DatasetFlags {
  sigkit::DatasetConfig vals;
  CLI::Option* classes = nullptr;
  CLI::Option* length = nullptr;
  CLI::Option* per_class = nullptr;
  CLI::Option* ratio = nullptr;
  CLI::Option* valfrac = nullptr;
  CLI::Option* test = nullptr;
  CLI::Option* snr = nullptr;
  CLI::Option* impair = nullptr;
  CLI::Option* multipath = nullptr;

  void add(CLI::App* sub) {
    classes = sub->add_option("--classes", vals.num_classes, "emitter classes");
    length = sub->add_option("--length", vals.sample_length, "samples per capture");
    per_class = sub->add_option("--per-class", vals.per_class_count,
                                "training captures per class");
    ratio = sub->add_option("--labeled-ratio", vals.labeled_ratio,
                            "labeled fraction of the training pool");
    valfrac = sub->add_option("--validation-fraction", vals.validation_fraction,
                              "validation fraction of the labeled subset");
    test = sub->add_option("--test-per-class", vals.test_per_class,
                           "held-out test captures per class");
    snr = sub->add_option("--snr", vals.snr_db, "channel SNR in dB");
    impair = sub->add_option("--impairment-scale", vals.impairment_scale,
                             "hardware impairment severity multiplier");
    multipath = sub->add_flag("--multipath", vals.multipath,
                              "apply the two-tap multipath channel");
  }

  bool any() const {
    return classes->count() || length->count() || per_class->count() ||
           ratio->count() || valfrac->count() || test->count() ||
           snr->count() || impair->count() || multipath->count();
  }

  void apply(sigkit::DatasetConfig& dc) const {
    if (classes->count()) dc.num_classes = vals.num_classes;
    if (length->count()) dc.sample_length = vals.sample_length;
    if (per_class->count()) dc.per_class_count = vals.per_class_count;
    if (ratio->count()) dc.labeled_ratio = vals.labeled_ratio;
    if (valfrac->count()) dc.validation_fraction = vals.validation_fraction;
    if (test->count()) dc.test_per_class = vals.test_per_class;
    if (snr->count()) dc.snr_db = vals.snr_db;
    if (impair->count()) dc.impairment_scale = vals.impairment_scale;
    if (multipath->count()) dc.multipath = vals.multipath;
  }
};

// ---------------------------------------------------------------------------
// gen

struct GenOpts {
  std::string config_path;
  std::string out_path;
  uint64_t seed = 0;
  DatasetFlags dflags;
};

int cmd_gen(const GenOpts& o, std::ostream& out) {
  json file;
  const json* fp = nullptr;
  if (!o.config_path.empty()) {
    file = read_json_file(o.config_path);
    // Accept either a bare dataset config object or an experiment-shaped
    // file with a "dataset" section.
    if (!file.contains("dataset")) file = json{{"dataset", file}};
    fp = &file;
  }
  sigkit::DatasetConfig dc;
  cvnet::ModelConfig mc;
  trainer::TrainConfig tc;
  compose_configs(fp, o.seed, dc, mc, tc);
  o.dflags.apply(dc);

  sigkit::Dataset ds = sigkit::build_dataset(dc);
  sigkit::normalize_min_max(ds);
  sigkit::save_dataset(ds, o.out_path);

  out << "wrote " << o.out_path << ": " << ds.labeled.size() << " labeled, "
      << ds.unlabeled.size() << " unlabeled, " << ds.validation.size()
      << " validation, " << ds.test.size() << " test (ratio "
      << fmtg(dc.labeled_ratio) << ", " << fmtg(dc.snr_db) << " dB)\n";
  json j{{"command", "gen"},
         {"out", o.out_path},
         {"num_classes", dc.num_classes},
         {"sample_length", dc.sample_length},
         {"labeled", ds.labeled.size()},
         {"unlabeled", ds.unlabeled.size()},
         {"validation", ds.validation.size()},
         {"test", ds.test.size()},
         {"labeled_ratio", dc.labeled_ratio},
         {"snr_db", dc.snr_db},
         {"master_seed", dc.master_seed}};
  emit_final(out, j);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
  std::string config_path;
  std::string dataset_path;
  std::string out_dir;
  uint64_t seed = 0;
  bool resume = false;
  bool no_vat = false;
  bool no_ssml = false;
  bool no_unlabeled = false;
  int stop_after = 0;
  DatasetFlags dflags;

  // model flags
  int blocks = 0, channels = 0, kernel = 0;
  std::string dense_variant;
  CLI::Option *o_blocks = nullptr, *o_channels = nullptr, *o_kernel = nullptr,
              *o_dense = nullptr;

  // train flags
  int iterations = 0, batch_size = 0, power_iters = 0;
  double lr_m = 0, lr_a = 0, tau = 0, alpha = 0, delta = 0, epsilon = 0, xi = 0;
  std::string metric, schedule;
  CLI::Option *o_iterations = nullptr, *o_batch = nullptr, *o_lr_m = nullptr,
              *o_lr_a = nullptr, *o_tau = nullptr, *o_alpha = nullptr,
              *o_delta = nullptr, *o_epsilon = nullptr, *o_xi = nullptr,
              *o_power = nullptr, *o_metric = nullptr, *o_schedule = nullptr;
};

void add_model_train_flags(CLI::App* sub, TrainOpts& t) {
  t.o_blocks = sub->add_option("--blocks", t.blocks, "conv blocks");
  t.o_channels = sub->add_option("--channels", t.channels,
                                 "complex channels per conv layer");
  t.o_kernel = sub->add_option("--kernel", t.kernel, "conv kernel length (odd)");
  t.o_dense = sub->add_option("--dense-variant", t.dense_variant,
                              "dense stack: short | long");

  t.o_iterations = sub->add_option("--iterations", t.iterations, "training iterations");
  t.o_batch = sub->add_option("--batch-size", t.batch_size, "per-branch batch size");
  t.o_lr_m = sub->add_option("--lr-m", t.lr_m, "model learning rate");
  t.o_lr_a = sub->add_option("--lr-a", t.lr_a,
                             "metric-parameter learning rate (negative: per-metric default)");
  t.o_tau = sub->add_option("--tau", t.tau, "pseudo-label confidence threshold");
  t.o_alpha = sub->add_option("--alpha", t.alpha, "proxy-anchor scale");
  t.o_delta = sub->add_option("--delta", t.delta, "proxy-anchor margin");
  t.o_epsilon = sub->add_option("--epsilon", t.epsilon, "adversarial perturbation radius");
  t.o_xi = sub->add_option("--xi", t.xi, "power-iteration probe scale");
  t.o_power = sub->add_option("--power-iters", t.power_iters, "power iterations");
  t.o_metric = sub->add_option("--metric", t.metric, "metric loss: center | pa | none");
  t.o_schedule = sub->add_option("--schedule", t.schedule, "objective schedule: alt | sim");
}

void apply_model_train_flags(const TrainOpts& t, cvnet::ModelConfig& mc,
                             trainer::TrainConfig& tc) {
  if (t.o_blocks->count()) mc.num_blocks = t.blocks;
  if (t.o_channels->count()) mc.channels = t.channels;
  if (t.o_kernel->count()) mc.kernel = t.kernel;
  if (t.o_dense->count()) mc.dense_variant = t.dense_variant;

  if (t.o_iterations->count()) tc.iterations = t.iterations;
  if (t.o_batch->count()) tc.batch_size = t.batch_size;
  if (t.o_lr_m->count()) tc.lr_m = t.lr_m;
  if (t.o_lr_a->count()) tc.lr_a = t.lr_a;
  if (t.o_tau->count()) tc.tau = t.tau;
  if (t.o_alpha->count()) tc.alpha = t.alpha;
  if (t.o_delta->count()) tc.delta = t.delta;
  if (t.o_epsilon->count()) tc.epsilon = t.epsilon;
  if (t.o_xi->count()) tc.xi = t.xi;
  if (t.o_power->count()) tc.power_iters = t.power_iters;
  if (t.o_metric->count()) tc.metric = canonical_metric(t.metric);
  if (t.o_schedule->count()) tc.schedule = canonical_schedule(t.schedule);

  if (t.no_vat) tc.vat_enabled = false;
  if (t.no_ssml) tc.metric = "none";
  if (t.no_unlabeled) tc.unlabeled_enabled = false;
}

int cmd_train(const TrainOpts& o, std::ostream& out, std::ostream& err) {
  json file;
  const json* fp = nullptr;
  if (!o.config_path.empty()) {
    file = read_json_file(o.config_path);
    fp = &file;
  }
  sigkit::DatasetConfig dc;
  cvnet::ModelConfig mc;
  trainer::TrainConfig tc;
  compose_configs(fp, o.seed, dc, mc, tc);
  o.dflags.apply(dc);
  apply_model_train_flags(o, mc, tc);

  sigkit::Dataset ds;
  if (!o.dataset_path.empty()) {
    if (o.dflags.any())
      throw ExitError{kExitConfig,
                      "--dataset conflicts with dataset generation flags"};
    ds = sigkit::load_dataset(o.dataset_path);
  } else {
    ds = sigkit::build_dataset(dc);
    sigkit::normalize_min_max(ds);
  }
  mc.num_classes = ds.num_classes;  // always inferred from the data

  make_dirs(o.out_dir);
  trainer::Trainer tr(ds, mc, tc);
  trainer::Trainer::Paths paths;
  paths.report = (fs::path(o.out_dir) / "report.jsonl").string();
  paths.last_ckpt = (fs::path(o.out_dir) / "last.ckpt").string();
  paths.best_ckpt = (fs::path(o.out_dir) / "best.ckpt").string();

  if (o.resume && fs::exists(paths.last_ckpt)) tr.restore(paths.last_ckpt);

  out << ds.labeled.size() << " labeled / " << ds.unlabeled.size()
      << " unlabeled / " << ds.validation.size() << " validation / "
      << ds.test.size() << " test; config " << hex64(tr.config_hash()) << "\n";

  const auto t0 = std::chrono::steady_clock::now();
  try {
    tr.run(paths, o.stop_after);
  } catch (const NonFiniteError& e) {
    json dump{{"error", "non_finite"},
              {"message", e.what()},
              {"next_iteration", tr.next_iteration()},
              {"config_hash", hex64(tr.config_hash())}};
    const std::string dpath = (fs::path(o.out_dir) / "nonfinite.json").string();
    write_text_file(dpath, dump.dump(2) + "\n");
    err << "training aborted on non-finite loss; diagnostics: " << dpath << "\n";
    json j{{"command", "train"},
           {"out_dir", o.out_dir},
           {"dump", dpath},
           {"error", {{"code", kExitNonFinite}, {"message", e.what()}}}};
    emit_final(out, j);
    return kExitNonFinite;
  }
  const double wall_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const double val = tr.validation_accuracy();
  json summary{{"command", "train"},
               {"out_dir", o.out_dir},
               {"experiment", trainer::experiment_json(ds.config, mc, tc)},
               {"config_hash", hex64(tr.config_hash())},
               {"iterations", tc.iterations},
               {"iterations_completed", tr.next_iteration() - 1},
               {"best_val_acc", tr.best_val() < 0 ? json(nullptr) : json(tr.best_val())},
               {"best_iteration", tr.best_iteration()},
               {"val_accuracy", val < 0 ? json(nullptr) : json(val)},
               {"report", "report.jsonl"},
               {"last_checkpoint", "last.ckpt"},
               {"best_checkpoint", "best.ckpt"},
               {"wall_s", wall_s}};
  if (!ds.test.empty()) {
    // Test metrics score the selected model: the best-validation checkpoint
    // when one was retained, the final parameters otherwise.
    evalkit::EvalResult res;
    if (fs::exists(paths.best_ckpt) && tr.best_val() >= 0) {
      cvnet::Network best(mc);
      best.load_state(gradcore::load_checkpoint(paths.best_ckpt).tensors);
      res = evalkit::evaluate(best, ds, tc.tau);
      summary["evaluated_checkpoint"] = "best.ckpt";
    } else {
      res = evalkit::evaluate(tr.network(), ds, tc.tau);
      summary["evaluated_checkpoint"] = "last.ckpt";
    }
    summary["test_accuracy"] = res.accuracy;
    summary["silhouette"] = res.silhouette;
    summary["per_class_recall"] = res.per_class_recall;
    summary["pseudo_label_accuracy"] =
        res.pseudo_label_accuracy ? json(*res.pseudo_label_accuracy) : json(nullptr);
  } else {
    summary["test_accuracy"] = nullptr;
    summary["silhouette"] = nullptr;
  }
  write_text_file((fs::path(o.out_dir) / "summary.json").string(),
                  summary.dump(2) + "\n");
  emit_final(out, summary);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOpts {
  std::string checkpoint;
  std::string dataset;
  double tau = -1.0;
  CLI::Option* o_tau = nullptr;
  std::string embeddings;
  std::string split = "test";
};

int cmd_eval(const EvalOpts& o, std::ostream& out) {
  json meta = read_json_file(o.checkpoint + ".meta.json");
  if (!meta.contains("experiment") || !meta["experiment"].contains("model") ||
      !meta["experiment"].contains("train"))
    throw ExitError{kExitIo, "checkpoint sidecar lacks the experiment record: " +
                                 o.checkpoint + ".meta.json"};
  auto mc = meta["experiment"]["model"].get<cvnet::ModelConfig>();
  auto tc = meta["experiment"]["train"].get<trainer::TrainConfig>();
  const double tau = o.o_tau->count() ? o.tau : tc.tau;

  sigkit::Dataset ds = sigkit::load_dataset(o.dataset);
  if (mc.num_classes != ds.num_classes)
    throw ExitError{kExitConfig, "checkpoint expects " +
                                     std::to_string(mc.num_classes) +
                                     " classes, dataset has " +
                                     std::to_string(ds.num_classes)};

  gradcore::CheckpointData data = gradcore::load_checkpoint(o.checkpoint);
  cvnet::Network net(mc);
  net.load_state(data.tensors);

  evalkit::EvalResult res = evalkit::evaluate(net, ds, tau);
  json j = res;
  j["command"] = "eval";
  j["checkpoint"] = o.checkpoint;
  j["dataset"] = o.dataset;
  j["tau"] = tau;
  j["iteration"] = meta.value("iteration", int64_t{0});

  if (!o.embeddings.empty()) {
    const std::vector<sigkit::IQSignal>* part = nullptr;
    if (o.split == "test")
      part = &ds.test;
    else if (o.split == "validation")
      part = &ds.validation;
    else if (o.split == "labeled")
      part = &ds.labeled;
    else if (o.split == "unlabeled")
      part = &ds.unlabeled;
    else
      throw ExitError{kExitConfig, "unknown --split: " + o.split};
    evalkit::export_embeddings(net, *part, o.embeddings);
    j["embeddings"] = o.embeddings;
  }
  emit_final(out, j);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// grid

struct GridOpts {
  std::string manifest;
  std::string out_dir;
  std::string exe;
  int jobs = 1;
};

struct GridCell {
  std::string name;
  std::string dir;
  sigkit::DatasetConfig dc;
  cvnet::ModelConfig mc;
  trainer::TrainConfig tc;
  std::string dataset_file;
};

template <typename T>
std::vector<T> axis_values(const json& axes, const std::string& key,
                           const T& fallback) {
  if (!axes.contains(key)) return {fallback};
  const json& a = axes.at(key);
  if (!a.is_array() || a.empty())
    throw ExitError{kExitConfig, "axis '" + key + "' must be a non-empty array"};
  return a.get<std::vector<T>>();
}

int cmd_grid(const GridOpts& o, std::ostream& out, std::ostream& err) {
  json m = read_json_file(o.manifest);
  static const std::set<std::string> kTopKeys{"experiment_id", "out_dir",
                                              "dataset", "model", "train", "axes"};
  for (const auto& [k, v] : m.items())
    if (!kTopKeys.count(k)) throw ExitError{kExitConfig, "unknown manifest key: " + k};

  const std::string id = m.value("experiment_id", std::string());
  if (id.empty()) throw ExitError{kExitConfig, "manifest needs experiment_id"};
  const std::string outd = !o.out_dir.empty() ? o.out_dir
                                              : m.value("out_dir", std::string());
  if (outd.empty())
    throw ExitError{kExitConfig, "output directory required (manifest out_dir or --out)"};

  sigkit::DatasetConfig dc;
  if (m.contains("dataset")) dc = m["dataset"].get<sigkit::DatasetConfig>();
  cvnet::ModelConfig mc;
  if (m.contains("model")) mc = m["model"].get<cvnet::ModelConfig>();
  trainer::TrainConfig tc;
  if (m.contains("train")) tc = m["train"].get<trainer::TrainConfig>();
  const bool model_seed_fixed = m.contains("model") && m["model"].contains("init_seed");

  const json axes = m.value("axes", json::object());
  static const std::set<std::string> kAxisKeys{"labeled_ratio", "metric",
                                               "schedule", "vat", "unlabeled", "seed"};
  for (const auto& [k, v] : axes.items())
    if (!kAxisKeys.count(k)) throw ExitError{kExitConfig, "unknown axis: " + k};

  const auto ratios = axis_values<double>(axes, "labeled_ratio", dc.labeled_ratio);
  auto metrics = axis_values<std::string>(axes, "metric", tc.metric);
  for (auto& v : metrics) v = canonical_metric(v);
  auto schedules = axis_values<std::string>(axes, "schedule", tc.schedule);
  for (auto& v : schedules) v = canonical_schedule(v);
  const auto vats = axis_values<bool>(axes, "vat", tc.vat_enabled);
  const auto unls = axis_values<bool>(axes, "unlabeled", tc.unlabeled_enabled);
  const auto seeds = axis_values<uint64_t>(axes, "seed", tc.seed);

  make_dirs(outd);
  make_dirs((fs::path(outd) / "cells").string());
  make_dirs((fs::path(outd) / "datasets").string());

  // One grid per output directory.
  const std::string id_file = (fs::path(outd) / "experiment_id").string();
  if (fs::exists(id_file)) {
    std::ifstream in(id_file);
    std::string prev;
    std::getline(in, prev);
    if (prev != id)
      throw ExitError{kExitConfig, "output directory belongs to experiment '" +
                                       prev + "', not '" + id + "'"};
  } else {
    write_text_file(id_file, id + "\n");
  }

  std::vector<GridCell> cells;
  for (double r : ratios)
    for (const auto& metric : metrics)
      for (const auto& schedule : schedules)
        for (bool vat : vats)
          for (bool unl : unls)
            for (uint64_t seed : seeds) {
              GridCell c;
              c.dc = dc;
              c.dc.labeled_ratio = r;
              c.mc = mc;
              c.mc.num_classes = dc.num_classes;
              if (!model_seed_fixed) c.mc.init_seed = derive_seed(seed, "model");
              c.tc = tc;
              c.tc.metric = metric;
              c.tc.schedule = schedule;
              c.tc.vat_enabled = vat;
              c.tc.unlabeled_enabled = unl;
              c.tc.seed = seed;
              c.name = "ratio" + fmtg(r) + "_" + metric + "_" +
                       (schedule == "alternating" ? "alt" : "sim") +
                       (vat ? "_vat" : "_novat") + (unl ? "_unl" : "_nounl") +
                       "_seed" + std::to_string(seed);
              c.dir = (fs::path(outd) / "cells" / c.name).string();
              cells.push_back(std::move(c));
            }

  // Datasets are shared across cells with identical dataset configs.
  std::map<std::string, sigkit::DatasetConfig> wanted;
  for (auto& c : cells) {
    const json jd = c.dc;
    const std::string h = hex64(fnv1a(jd.dump()));
    c.dataset_file = (fs::path(outd) / "datasets" / ("ds_" + h + ".bin")).string();
    wanted.emplace(c.dataset_file, c.dc);
  }
  for (const auto& [path, cfg] : wanted) {
    if (fs::exists(path)) continue;
    sigkit::Dataset ds = sigkit::build_dataset(cfg);
    sigkit::normalize_min_max(ds);
    sigkit::save_dataset(ds, path);
    err << "built dataset " << path << "\n";
  }

  std::string exe = o.exe;
  if (exe.empty()) {
    std::error_code ec;
    exe = fs::read_symlink("/proc/self/exe", ec).string();
    if (ec) throw ExitError{kExitConfig, "cannot resolve own executable; pass --exe"};
  }

  // Pending cells run as child processes with disjoint output directories.
  std::vector<size_t> pending;
  int skipped = 0;
  for (size_t i = 0; i < cells.size(); ++i) {
    if (fs::exists(fs::path(cells[i].dir) / ".done"))
      ++skipped;
    else
      pending.push_back(i);
  }

  std::vector<int> exit_codes(cells.size(), 0);
  for (size_t i : pending) {
    const GridCell& c = cells[i];
    make_dirs(c.dir);
    write_text_file((fs::path(c.dir) / "config.json").string(),
                    trainer::experiment_json(c.dc, c.mc, c.tc).dump(2) + "\n");
  }
  const auto run_cell = [&](size_t i) {
    const GridCell& c = cells[i];
    const std::string cmd =
        shell_quote(exe) + " train --config " +
        shell_quote((fs::path(c.dir) / "config.json").string()) + " --dataset " +
        shell_quote(c.dataset_file) + " --out " + shell_quote(c.dir) + " > " +
        shell_quote((fs::path(c.dir) / "stdout.log").string()) + " 2> " +
        shell_quote((fs::path(c.dir) / "stderr.log").string());
    exit_codes[i] = run_child(cmd);
  };
  const int jobs = std::max(1, o.jobs);
  if (jobs == 1 || pending.size() <= 1) {
    for (size_t i : pending) run_cell(i);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    const size_t width = std::min<size_t>(static_cast<size_t>(jobs), pending.size());
    for (size_t w = 0; w < width; ++w)
      pool.emplace_back([&] {
        for (size_t k = next.fetch_add(1); k < pending.size();
             k = next.fetch_add(1))
          run_cell(pending[k]);
      });
    for (auto& th : pool) th.join();
  }

  json failed = json::array();
  int completed = skipped;
  for (size_t i : pending) {
    const GridCell& c = cells[i];
    const bool ok = exit_codes[i] == 0 &&
                    fs::exists(fs::path(c.dir) / "summary.json");
    if (ok) {
      write_text_file((fs::path(c.dir) / ".done").string(), c.name + "\n");
      ++completed;
    } else {
      failed.push_back({{"cell", c.name}, {"exit_code", exit_codes[i]}});
      err << "cell failed (exit " << exit_codes[i] << "): " << c.name << "\n";
    }
  }

  // Aggregate finished cells.
  std::string results_csv =
      "cell,labeled_ratio,metric,schedule,vat,unlabeled,seed,"
      "test_accuracy,silhouette,best_val_acc\n";
  std::map<std::string, std::map<double, std::vector<double>>> pivot;
  std::vector<std::string> method_order;
  for (const GridCell& c : cells) {
    if (!fs::exists(fs::path(c.dir) / ".done")) continue;
    json s = read_json_file((fs::path(c.dir) / "summary.json").string());
    const json acc = s.value("test_accuracy", json(nullptr));
    const json sil = s.value("silhouette", json(nullptr));
    const json bva = s.value("best_val_acc", json(nullptr));
    results_csv += c.name + "," + fmtg(c.dc.labeled_ratio) + "," + c.tc.metric +
                   "," + c.tc.schedule + "," + (c.tc.vat_enabled ? "1" : "0") +
                   "," + (c.tc.unlabeled_enabled ? "1" : "0") + "," +
                   std::to_string(c.tc.seed) + "," +
                   (acc.is_null() ? "" : fmt17(acc.get<double>())) + "," +
                   (sil.is_null() ? "" : fmt17(sil.get<double>())) + "," +
                   (bva.is_null() ? "" : fmt17(bva.get<double>())) + "\n";
    const std::string method = method_label(c.tc.metric, c.tc.schedule,
                                            c.tc.vat_enabled, c.tc.unlabeled_enabled);
    if (!pivot.count(method)) method_order.push_back(method);
    if (!acc.is_null()) pivot[method][c.dc.labeled_ratio].push_back(acc.get<double>());
    else pivot[method];  // keep the row even without test accuracy
  }
  const std::string results_path = (fs::path(outd) / "results.csv").string();
  write_text_file(results_path, results_csv);

  std::vector<double> ratio_cols(ratios);
  std::sort(ratio_cols.begin(), ratio_cols.end());
  ratio_cols.erase(std::unique(ratio_cols.begin(), ratio_cols.end()),
                   ratio_cols.end());
  std::string table_csv = "method";
  for (double r : ratio_cols) table_csv += "," + fmtg(r);
  table_csv += "\n";
  for (const auto& method : method_order) {
    table_csv += method;
    for (double r : ratio_cols) {
      auto it = pivot[method].find(r);
      table_csv += ",";
      if (it != pivot[method].end() && !it->second.empty())
        table_csv += fmt17(median(it->second));
    }
    table_csv += "\n";
  }
  const std::string table_path = (fs::path(outd) / "table.csv").string();
  write_text_file(table_path, table_csv);

  json j{{"command", "grid"},
         {"experiment_id", id},
         {"out_dir", outd},
         {"cells", cells.size()},
         {"completed", completed},
         {"skipped", skipped},
         {"failed", failed},
         {"results_csv", results_path},
         {"table_csv", table_path}};
  emit_final(out, j);
  return failed.empty() ? kExitOk : kExitUsage;
}

// ---------------------------------------------------------------------------
// report

struct ReportOpts {
  std::vector<std::string> run_dirs;
  std::string out_dir = "report";
};

struct RunSeries {
  std::string name;
  std::map<int64_t, double> objective;  // iteration -> objective value
  json summary;                         // null when summary.json is absent
};

int cmd_report(const ReportOpts& o, std::ostream& out) {
  std::vector<RunSeries> runs;
  std::set<std::string> used_names;
  for (const auto& dir : o.run_dirs) {
    RunSeries rs;
    std::string base = fs::path(dir).filename().string();
    if (base.empty()) base = fs::path(dir).parent_path().filename().string();
    if (base.empty()) base = dir;
    rs.name = base;
    for (int k = 2; used_names.count(rs.name); ++k)
      rs.name = base + "#" + std::to_string(k);
    used_names.insert(rs.name);

    const std::string rpath = (fs::path(dir) / "report.jsonl").string();
    std::ifstream in(rpath);
    if (!in) throw ExitError{kExitIo, "missing report stream: " + rpath};
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json rec;
      try {
        rec = json::parse(line);
      } catch (const json::exception& e) {
        throw ExitError{kExitIo, rpath + ": corrupt report stream: " + e.what()};
      }
      if (first) {  // header line carries the experiment, not an iteration
        first = false;
        if (rec.contains("experiment")) continue;
      }
      if (!rec.contains("t") || !rec.contains("loss_terms") ||
          !rec["loss_terms"].contains("objective"))
        throw ExitError{kExitIo, rpath + ": corrupt report stream: record lacks t/loss_terms.objective"};
      rs.objective[rec["t"].get<int64_t>()] =
          rec["loss_terms"]["objective"].get<double>();
    }
    if (rs.objective.empty())
      throw ExitError{kExitIo, rpath + ": report stream has no iterations"};

    const std::string spath = (fs::path(dir) / "summary.json").string();
    rs.summary = fs::exists(spath) ? read_json_file(spath) : json(nullptr);
    runs.push_back(std::move(rs));
  }

  make_dirs(o.out_dir);

  // Loss curves joined on iteration.
  std::set<int64_t> ts;
  for (const auto& r : runs)
    for (const auto& [t, v] : r.objective) ts.insert(t);
  std::string loss_csv = "t";
  for (const auto& r : runs) loss_csv += "," + r.name;
  loss_csv += "\n";
  for (int64_t t : ts) {
    loss_csv += std::to_string(t);
    for (const auto& r : runs) {
      auto it = r.objective.find(t);
      loss_csv += ",";
      if (it != r.objective.end()) loss_csv += fmt17(it->second);
    }
    loss_csv += "\n";
  }
  const std::string loss_path = (fs::path(o.out_dir) / "loss_curves.csv").string();
  write_text_file(loss_path, loss_csv);

  // Accuracy grouped by method and labeled ratio (runs with summaries only).
  struct Group {
    std::vector<double> acc, sil;
  };
  std::map<std::string, std::map<double, Group>> groups;
  std::vector<std::string> method_order;
  for (const auto& r : runs) {
    if (r.summary.is_null() || !r.summary.contains("experiment")) continue;
    const json& exp = r.summary["experiment"];
    const json& jt = exp.value("train", json::object());
    const std::string method =
        method_label(jt.value("metric", std::string("none")),
                     jt.value("schedule", std::string("alternating")),
                     jt.value("vat_enabled", false),
                     jt.value("unlabeled_enabled", false));
    const double ratio =
        exp.value("dataset", json::object()).value("labeled_ratio", 0.0);
    if (!groups.count(method)) method_order.push_back(method);
    Group& g = groups[method][ratio];
    if (r.summary.contains("test_accuracy") && !r.summary["test_accuracy"].is_null())
      g.acc.push_back(r.summary["test_accuracy"].get<double>());
    if (r.summary.contains("silhouette") && !r.summary["silhouette"].is_null())
      g.sil.push_back(r.summary["silhouette"].get<double>());
  }
  std::string acc_csv = "method,labeled_ratio,runs,median_test_accuracy,median_silhouette\n";
  for (const auto& method : method_order)
    for (const auto& [ratio, g] : groups[method]) {
      acc_csv += method + "," + fmtg(ratio) + "," +
                 std::to_string(std::max(g.acc.size(), g.sil.size())) + "," +
                 (g.acc.empty() ? "" : fmt17(median(g.acc))) + "," +
                 (g.sil.empty() ? "" : fmt17(median(g.sil))) + "\n";
    }
  const std::string acc_path =
      (fs::path(o.out_dir) / "accuracy_vs_ratio.csv").string();
  write_text_file(acc_path, acc_csv);

  // Markdown summary.
  std::string md = "# Run summary\n\n";
  md += "| run | method | labeled ratio | seed | first objective | last objective | test accuracy | silhouette |\n";
  md += "|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : runs) {
    std::string method = "-", ratio = "-", seed = "-", acc = "-", sil = "-";
    if (!r.summary.is_null() && r.summary.contains("experiment")) {
      const json& exp = r.summary["experiment"];
      const json& jt = exp.value("train", json::object());
      method = method_label(jt.value("metric", std::string("none")),
                            jt.value("schedule", std::string("alternating")),
                            jt.value("vat_enabled", false),
                            jt.value("unlabeled_enabled", false));
      ratio = fmtg(exp.value("dataset", json::object()).value("labeled_ratio", 0.0));
      seed = std::to_string(jt.value("seed", uint64_t{0}));
      if (r.summary.contains("test_accuracy") && !r.summary["test_accuracy"].is_null())
        acc = fmtg(r.summary["test_accuracy"].get<double>());
      if (r.summary.contains("silhouette") && !r.summary["silhouette"].is_null())
        sil = fmtg(r.summary["silhouette"].get<double>());
    }
    md += "| " + r.name + " | " + method + " | " + ratio + " | " + seed + " | " +
          fmtg(r.objective.begin()->second) + " | " +
          fmtg(r.objective.rbegin()->second) + " | " + acc + " | " + sil + " |\n";
  }
  std::set<double> ratio_cols;
  for (const auto& method : method_order)
    for (const auto& [ratio, g] : groups[method]) ratio_cols.insert(ratio);
  if (!method_order.empty()) {
    md += "\n# Median test accuracy by labeled ratio\n\n| method |";
    for (double r : ratio_cols) md += " " + fmtg(r) + " |";
    md += "\n|---|";
    for (size_t i = 0; i < ratio_cols.size(); ++i) md += "---|";
    md += "\n";
    for (const auto& method : method_order) {
      md += "| " + method + " |";
      for (double r : ratio_cols) {
        auto it = groups[method].find(r);
        if (it != groups[method].end() && !it->second.acc.empty())
          md += " " + fmtg(median(it->second.acc)) + " |";
        else
          md += " - |";
      }
      md += "\n";
    }
  }
  const std::string md_path = (fs::path(o.out_dir) / "summary.md").string();
  write_text_file(md_path, md);

  json j{{"command", "report"},
         {"runs", runs.size()},
         {"loss_csv", loss_path},
         {"accuracy_csv", acc_path},
         {"summary_md", md_path}};
  emit_final(out, j);
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out,
        std::ostream& err) {
  CLI::App app{
      "Semi-supervised emitter-fingerprint trainer.\n"
      "Exit codes: 0 ok, 1 usage or failed grid cells, 2 invalid configuration, "
      "3 missing or corrupt files, 4 non-finite loss abort.\n"
      "The last stdout line of every command is a JSON summary.\n"
      "MAT_THREADS caps worker threads inside the numeric kernels."};
  app.name("mat");
  app.require_subcommand(1);

  GenOpts gen;
  CLI::App* gen_sub = app.add_subcommand("gen", "generate a synthetic IQ dataset");
  gen_sub->add_option("--config", gen.config_path,
                      "dataset config JSON (bare object or {\"dataset\": ...})");
  gen_sub->add_option("--out", gen.out_path, "output dataset file")->required();
  gen_sub->add_option("--seed", gen.seed, "master seed (fans out to all components)");
  gen.dflags.add(gen_sub);

  TrainOpts train;
  CLI::App* train_sub = app.add_subcommand("train", "train a model");
  train_sub->add_option("--config", train.config_path,
                        "experiment config JSON ({\"dataset\",\"model\",\"train\"})");
  train_sub->add_option("--dataset", train.dataset_path,
                        "dataset file (omit to generate in memory from flags)");
  train_sub->add_option("--out", train.out_dir, "output directory")->required();
  train_sub->add_option("--seed", train.seed, "master seed (fans out to all components)");
  train_sub->add_flag("--resume", train.resume,
                      "continue from <out>/last.ckpt when present");
  train_sub->add_option("--stop-after", train.stop_after,
                        "stop after this iteration (0: run to completion)");
  train_sub->add_flag("--no-vat", train.no_vat, "disable adversarial smoothing");
  train_sub->add_flag("--no-ssml", train.no_ssml, "disable the metric objective");
  train_sub->add_flag("--no-unlabeled", train.no_unlabeled,
                      "train on the labeled subset only");
  train.dflags.add(train_sub);
  add_model_train_flags(train_sub, train);

  EvalOpts eval;
  CLI::App* eval_sub = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_sub->add_option("--checkpoint", eval.checkpoint, "checkpoint file")->required();
  eval_sub->add_option("--dataset", eval.dataset, "dataset file")->required();
  eval.o_tau = eval_sub->add_option("--tau", eval.tau,
                                    "pseudo-label threshold (default: training value)");
  eval_sub->add_option("--embeddings", eval.embeddings,
                       "write feature embeddings TSV to this path");
  eval_sub->add_option("--split", eval.split,
                       "partition for --embeddings: test | validation | labeled | unlabeled");

  GridOpts grid;
  CLI::App* grid_sub = app.add_subcommand("grid", "run an experiment grid");
  grid_sub->add_option("--manifest", grid.manifest, "grid manifest JSON")->required();
  grid_sub->add_option("--out", grid.out_dir, "override the manifest out_dir");
  grid_sub->add_option("--exe", grid.exe,
                       "trainer executable for grid cells (default: this binary)");
  grid_sub->add_option("--jobs", grid.jobs, "concurrent cell processes");

  ReportOpts report;
  CLI::App* report_sub = app.add_subcommand("report", "tabulate finished runs");
  report_sub->add_option("dirs", report.run_dirs, "run directories")
      ->required()
      ->expected(-1);
  report_sub->add_option("--out", report.out_dir, "output directory");

  std::string active;
  const auto fail = [&](int code, const std::string& message) {
    err << "error: " << message << "\n";
    json j{{"command", active.empty() ? json(nullptr) : json(active)},
           {"error", {{"code", code}, {"message", message}}}};
    emit_final(out, j);
    return code;
  };

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
    if (gen_sub->parsed()) {
      active = "gen";
      return cmd_gen(gen, out);
    }
    if (train_sub->parsed()) {
      active = "train";
      return cmd_train(train, out, err);
    }
    if (eval_sub->parsed()) {
      active = "eval";
      return cmd_eval(eval, out);
    }
    if (grid_sub->parsed()) {
      active = "grid";
      return cmd_grid(grid, out, err);
    }
    if (report_sub->parsed()) {
      active = "report";
      return cmd_report(report, out);
    }
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kExitOk : kExitUsage;
  } catch (const ExitError& e) {
    return fail(e.code, e.message);
  } catch (const NonFiniteError& e) {
    return fail(kExitNonFinite, e.what());
  } catch (const ConfigMismatchError& e) {
    return fail(kExitConfig, e.what());
  } catch (const VersionError& e) {
    return fail(kExitIo, e.what());
  } catch (const TruncationError& e) {
    return fail(kExitIo, e.what());
  } catch (const ChecksumError& e) {
    return fail(kExitIo, e.what());
  } catch (const FormatError& e) {
    return fail(kExitIo, e.what());
  } catch (const json::exception& e) {
    return fail(kExitConfig, e.what());
  } catch (const std::invalid_argument& e) {
    return fail(kExitConfig, e.what());
  } catch (const std::exception& e) {
    return fail(kExitIo, e.what());
  }
}

}  // namespace mat::cli
