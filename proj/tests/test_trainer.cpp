#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "mat/checkpoint.hpp"
#include "mat/common.hpp"
#include "mat/ops.hpp"
#include "mat/trainer.hpp"

using namespace mat;
using namespace mat::trainer;
using gradcore::Tensor;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto d = fs::temp_directory_path() / "trainer_test";
  fs::create_directories(d);
  return d;
}

// Small but trainable corpus: 9 labeled / 18 unlabeled / 3 validation.
sigkit::Dataset toy_dataset() {
  sigkit::DatasetConfig dc;
  dc.num_classes = 3;
  dc.sample_length = 32;
  dc.per_class_count = 10;
  dc.labeled_ratio = 0.4;
  dc.validation_fraction = 0.3;
  dc.test_per_class = 3;
  dc.snr_db = 18.0;
  dc.impairment_scale = 2.0;
  dc.master_seed = 7;
  auto ds = sigkit::build_dataset(dc);
  sigkit::normalize_min_max(ds);
  return ds;
}

cvnet::ModelConfig toy_model() {
  cvnet::ModelConfig mc;
  mc.num_classes = 3;
  mc.num_blocks = 2;
  mc.channels = 4;
  mc.init_seed = 5;
  return mc;
}

TrainConfig toy_train(int iterations) {
  TrainConfig tc;
  tc.iterations = iterations;
  tc.batch_size = 4;
  tc.seed = 11;
  return tc;
}

// Hand-made dataset where sample identity is encoded in the first I value,
// for verifying batch plans without any synthesis.
sigkit::Dataset counting_dataset(int labeled, int unlabeled, int n = 4) {
  sigkit::Dataset ds;
  ds.num_classes = 2;
  ds.normalized = true;
  auto mk = [&](int id, bool with_label) {
    sigkit::IQSignal s;
    s.iq.assign(static_cast<size_t>(2 * n), 0.0f);
    s.iq[0] = static_cast<float>(id);
    if (with_label) s.label = id % 2;
    return s;
  };
  for (int i = 0; i < labeled; ++i) ds.labeled.push_back(mk(i, true));
  for (int i = 0; i < unlabeled; ++i) ds.unlabeled.push_back(mk(i, false));
  return ds;
}

int row_id(const Tensor& batch, int row) {
  const int n = batch.dim(2);
  return static_cast<int>(
      std::lround(batch.data()[static_cast<size_t>(row) * 2 * n]));
}

nlohmann::json strip_wall(const IterationRecord& r) {
  auto j = record_json(r);
  j.erase("wall_ms");
  return j;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(bool(in));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

void check_same_network(cvnet::Network& a, cvnet::Network& b) {
  auto pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    INFO("parameter ", pa[i].name());
    CHECK(pa[i].values() == pb[i].values());
  }
  auto ba = a.running_buffers(), bb = b.running_buffers();
  REQUIRE(ba.size() == bb.size());
  for (size_t i = 0; i < ba.size(); ++i) {
    INFO("buffer ", ba[i].name());
    CHECK(ba[i].values() == bb[i].values());
  }
}

}  // namespace

// ---------------------------------------------------------------- checkpoint

TEST_CASE("checkpoint round-trips tensors and optimizer state exactly") {
  gradcore::CheckpointData d;
  d.tensors.emplace("w", Tensor::from_data(
                             {2, 3}, {1.5, -2.25, 3.0, 0.0, 1e-300, -7.5}));
  d.tensors.emplace("s", Tensor::scalar(0.125));
  gradcore::AdamState st;
  st.m = {0.1, -0.2};
  st.v = {0.01, 0.02};
  st.t = 17;
  d.adam["theta_m"].emplace("w", st);
  d.adam["theta_a"];  // empty group must survive the trip too

  auto path = (temp_dir() / "round.ckpt").string();
  gradcore::save_checkpoint(path, d);
  auto back = gradcore::load_checkpoint(path);

  REQUIRE(back.tensors.size() == 2);
  CHECK(back.tensors.at("w").shape() == std::vector<int>{2, 3});
  CHECK(back.tensors.at("w").values() == d.tensors.at("w").values());
  CHECK(back.tensors.at("s").shape().empty());
  CHECK(back.tensors.at("s").item() == 0.125);
  REQUIRE(back.adam.size() == 2);
  CHECK(back.adam.at("theta_a").empty());
  const auto& bst = back.adam.at("theta_m").at("w");
  CHECK(bst.m == st.m);
  CHECK(bst.v == st.v);
  CHECK(bst.t == 17);
}

TEST_CASE("checkpoint corruption raises the matching error type") {
  gradcore::CheckpointData d;
  d.tensors.emplace("w", Tensor::from_data({4}, {1.0, 2.0, 3.0, 4.0}));
  gradcore::AdamState st;
  st.m = {0.5, 0.5, 0.5, 0.5};
  st.v = {1.0, 1.0, 1.0, 1.0};
  st.t = 3;
  d.adam["theta_m"].emplace("w", st);
  auto dir = temp_dir();
  auto base = (dir / "base.ckpt").string();
  gradcore::save_checkpoint(base, d);
  const auto size = fs::file_size(base);

  auto mutated = [&](const std::string& name, size_t offset,
                     unsigned char mask) {
    auto p = (dir / name).string();
    fs::copy_file(base, p, fs::copy_options::overwrite_existing);
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(static_cast<std::streamoff>(offset));
    char c = 0;
    f.get(c);
    f.seekp(static_cast<std::streamoff>(offset));
    f.put(static_cast<char>(c ^ mask));
    return p;
  };

  // magic is the first six bytes
  CHECK_THROWS_AS(gradcore::load_checkpoint(mutated("magic.ckpt", 0, 0xff)),
                  FormatError);
  // version is the u16 after the magic
  CHECK_THROWS_AS(gradcore::load_checkpoint(mutated("version.ckpt", 6, 0x04)),
                  VersionError);
  // a payload byte flip parses fine but fails the trailing checksum
  CHECK_THROWS_AS(
      gradcore::load_checkpoint(mutated("payload.ckpt", size - 6, 0x10)),
      ChecksumError);

  // cut off mid-payload and mid-checksum
  for (size_t cut : {size - 2, size - 11}) {
    auto p = (dir / ("trunc" + std::to_string(cut) + ".ckpt")).string();
    fs::copy_file(base, p, fs::copy_options::overwrite_existing);
    fs::resize_file(p, cut);
    CHECK_THROWS_AS(gradcore::load_checkpoint(p), TruncationError);
  }

  // arbitrary small file: bad magic, or truncation if even shorter
  auto junk = (dir / "junk.ckpt").string();
  std::ofstream(junk) << "not a checkpoint at all";
  CHECK_THROWS_AS(gradcore::load_checkpoint(junk), FormatError);
  auto tiny = (dir / "tiny.ckpt").string();
  std::ofstream(tiny) << "abc";
  CHECK_THROWS_AS(gradcore::load_checkpoint(tiny), TruncationError);
}

// ------------------------------------------------------------------- config

TEST_CASE("train config validation, serialization, and hashing") {
  CHECK_NOTHROW(validate(TrainConfig{}));
  auto rejects = [](auto&& mutate) {
    TrainConfig c;
    mutate(c);
    CHECK_THROWS_AS(validate(c), std::invalid_argument);
  };
  rejects([](TrainConfig& c) { c.iterations = 0; });
  rejects([](TrainConfig& c) { c.batch_size = 1; });
  rejects([](TrainConfig& c) { c.lr_m = 0.0; });
  rejects([](TrainConfig& c) { c.metric = "kmeans"; });
  rejects([](TrainConfig& c) { c.schedule = "random"; });
  rejects([](TrainConfig& c) { c.tau = 1.5; });
  rejects([](TrainConfig& c) { c.tau = -0.1; });
  rejects([](TrainConfig& c) { c.alpha = 0.0; });
  rejects([](TrainConfig& c) { c.delta = -1.0; });
  rejects([](TrainConfig& c) { c.epsilon = 0.0; });
  rejects([](TrainConfig& c) { c.xi = 0.0; });
  rejects([](TrainConfig& c) { c.power_iters = 0; });

  TrainConfig c;
  c.iterations = 42;
  c.metric = "proxy_anchor";
  c.lr_a = 0.7;
  c.schedule = "simultaneous";
  c.seed = 99;
  nlohmann::json j = c;
  auto back = j.get<TrainConfig>();
  CHECK(back.iterations == 42);
  CHECK(back.metric == "proxy_anchor");
  CHECK(back.lr_a == 0.7);
  CHECK(back.schedule == "simultaneous");
  CHECK(back.seed == 99);

  TrainConfig pa;
  pa.metric = "proxy_anchor";
  CHECK(resolved_lr_a(pa) == 0.05);
  CHECK(resolved_lr_a(TrainConfig{}) == 0.001);  // center default
  CHECK(resolved_lr_a(c) == 0.7);                // explicit value wins

  sigkit::DatasetConfig dc;
  cvnet::ModelConfig mc;
  TrainConfig t1, t2;
  t2.tau = 0.5;
  CHECK(experiment_hash(dc, mc, t1) == experiment_hash(dc, mc, t1));
  CHECK(experiment_hash(dc, mc, t1) != experiment_hash(dc, mc, t2));
  cvnet::ModelConfig mc2 = mc;
  mc2.channels = 32;
  CHECK(experiment_hash(dc, mc, t1) != experiment_hash(dc, mc2, t1));
  sigkit::DatasetConfig dc2 = dc;
  dc2.snr_db += 1.0;
  CHECK(experiment_hash(dc, mc, t1) != experiment_hash(dc2, mc, t1));
}

// ----------------------------------------------------------------- batching

TEST_CASE("epoch batching chunks the long stream and cycles the short one") {
  auto ds = counting_dataset(60, 540);
  TrainConfig tc;
  tc.batch_size = 32;
  tc.seed = 3;
  auto pairs = make_epoch_batches(ds, tc, 1);
  REQUIRE(pairs.size() == 17);

  for (const auto& p : pairs) {
    CHECK(p.labeled.dim(0) == 32);  // cycling stream always delivers a full batch
    CHECK(p.labels.size() == 32);
  }
  for (int b = 0; b < 16; ++b) CHECK(pairs[b].unlabeled.dim(0) == 32);
  CHECK(pairs[16].unlabeled.dim(0) == 28);

  // the chunked unlabeled stream is an exact permutation of the pool
  std::set<int> seen;
  int total = 0;
  for (const auto& p : pairs)
    for (int i = 0; i < p.unlabeled.dim(0); ++i, ++total)
      seen.insert(row_id(p.unlabeled, i));
  CHECK(total == 540);
  CHECK(seen.size() == 540);

  // labels travel with their rows
  for (const auto& p : pairs)
    for (int i = 0; i < p.labeled.dim(0); ++i)
      CHECK(p.labels[static_cast<size_t>(i)] == row_id(p.labeled, i) % 2);
}

TEST_CASE("batching honors disabled unlabeled data and pads a lone tail row") {
  auto ds = counting_dataset(60, 540);
  TrainConfig tc;
  tc.batch_size = 32;
  tc.unlabeled_enabled = false;
  auto pairs = make_epoch_batches(ds, tc, 1);
  REQUIRE(pairs.size() == 2);
  CHECK(!pairs[0].unlabeled.defined());
  CHECK(!pairs[1].unlabeled.defined());
  CHECK(pairs[0].labeled.dim(0) == 32);
  CHECK(pairs[1].labeled.dim(0) == 28);

  // 5 labeled samples in batches of 4 leave a lone tail row; it is padded
  // with a cycled duplicate so batch statistics stay defined.
  auto small = counting_dataset(5, 0);
  tc.batch_size = 4;
  tc.unlabeled_enabled = true;  // no unlabeled data exists, so moot
  auto p2 = make_epoch_batches(small, tc, 1);
  REQUIRE(p2.size() == 2);
  CHECK(p2[0].labeled.dim(0) == 4);
  CHECK(p2[1].labeled.dim(0) == 2);
  std::multiset<int> ids;
  for (const auto& p : p2)
    for (int i = 0; i < p.labeled.dim(0); ++i) ids.insert(row_id(p.labeled, i));
  CHECK(ids.size() == 6);                                  // one duplicate
  CHECK(std::set<int>(ids.begin(), ids.end()).size() == 5);  // all five present

  sigkit::Dataset empty;
  CHECK_THROWS_AS(make_epoch_batches(empty, tc, 1), std::invalid_argument);
}

TEST_CASE("batch plans are deterministic in (seed, t) and reshuffle across t") {
  auto ds = counting_dataset(20, 30);
  TrainConfig tc;
  tc.batch_size = 8;
  tc.seed = 5;
  auto a = make_epoch_batches(ds, tc, 3);
  auto b = make_epoch_batches(ds, tc, 3);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].labeled.values() == b[i].labeled.values());
    CHECK(a[i].labels == b[i].labels);
    CHECK(a[i].unlabeled.values() == b[i].unlabeled.values());
  }
  auto c = make_epoch_batches(ds, tc, 4);
  bool differs = false;
  for (size_t i = 0; i < a.size() && !differs; ++i)
    differs = a[i].labeled.values() != c[i].labeled.values() ||
              a[i].unlabeled.values() != c[i].unlabeled.values();
  CHECK(differs);
}

// ----------------------------------------------------------------- schedule

TEST_CASE("alternating schedule visits vat then ssml and isolates the metric") {
  auto ds = toy_dataset();
  Trainer tr(ds, toy_model(), toy_train(4));
  const uint64_t h0 = tr.theta_a_hash();
  auto recs = tr.run();
  REQUIRE(recs.size() == 4);
  CHECK(recs[0].branch == "vat");
  CHECK(recs[1].branch == "ssml");
  CHECK(recs[2].branch == "vat");
  CHECK(recs[3].branch == "ssml");

  // the metric moves only in ssml iterations
  CHECK(recs[0].theta_a_hash == h0);
  CHECK(recs[1].theta_a_hash != h0);
  CHECK(recs[2].theta_a_hash == recs[1].theta_a_hash);
  CHECK(recs[3].theta_a_hash != recs[2].theta_a_hash);

  // branch-specific loss terms
  CHECK(recs[0].loss_terms.count("vat") == 1);
  CHECK(recs[0].loss_terms.count("ssml") == 0);
  CHECK(recs[1].loss_terms.count("ssml") == 1);
  CHECK(recs[1].loss_terms.count("vat") == 0);
  for (const auto& r : recs) {
    CHECK(r.loss_terms.count("ss_ce") == 1);
    CHECK(r.loss_terms.count("objective") == 1);
    CHECK(r.val_acc >= 0.0);
    CHECK(r.val_acc <= 1.0);
    CHECK(r.pseudo_accept_rate >= 0.0);
    CHECK(r.pseudo_accept_rate <= 1.0);
  }
  CHECK(recs[0].sigma.count("ss_ce") == 1);
  CHECK(recs[0].sigma.count("vat") == 1);
  CHECK(recs[1].sigma.count("ssml") == 1);
}

TEST_CASE("simultaneous schedule folds every enabled term into each step") {
  auto ds = toy_dataset();
  auto tc = toy_train(2);
  tc.schedule = "simultaneous";
  Trainer tr(ds, toy_model(), tc);
  const uint64_t h0 = tr.theta_a_hash();
  auto recs = tr.run();
  REQUIRE(recs.size() == 2);
  for (const auto& r : recs) {
    CHECK(r.branch == "sim");
    CHECK(r.loss_terms.count("ss_ce") == 1);
    CHECK(r.loss_terms.count("vat") == 1);
    CHECK(r.loss_terms.count("ssml") == 1);
    CHECK(r.sigma.size() == 3);
  }
  CHECK(recs[0].theta_a_hash != h0);  // metric updated from the first step
  CHECK(recs[1].theta_a_hash != recs[0].theta_a_hash);
}

TEST_CASE("proxy-anchor metric trains and moves only in its branch") {
  auto ds = toy_dataset();
  auto tc = toy_train(2);
  tc.metric = "proxy_anchor";
  Trainer tr(ds, toy_model(), tc);
  const uint64_t h0 = tr.theta_a_hash();
  auto recs = tr.run();
  CHECK(recs[0].theta_a_hash == h0);
  CHECK(recs[1].theta_a_hash != h0);
  CHECK(recs[1].loss_terms.count("ssml") == 1);
  for (const auto& r : recs) {
    CHECK(std::isfinite(r.loss_terms.at("objective")));
  }
}

// ----------------------------------------------------------------- ablation

TEST_CASE("disabled components leave no trace in the report") {
  auto ds = toy_dataset();
  auto mc = toy_model();

  SUBCASE("without the adversarial term") {
    auto tc = toy_train(2);
    tc.vat_enabled = false;
    auto recs = Trainer(ds, mc, tc).run();
    for (const auto& r : recs) CHECK(r.loss_terms.count("vat") == 0);
    CHECK(recs[0].sigma.empty());  // vat slot degenerates to a single term
    CHECK(recs[1].sigma.size() == 2);
  }

  SUBCASE("without the metric term") {
    auto tc = toy_train(2);
    tc.metric = "none";
    auto recs = Trainer(ds, mc, tc).run();
    for (const auto& r : recs) CHECK(r.loss_terms.count("ssml") == 0);
    CHECK(recs[1].sigma.empty());
    CHECK(recs[0].theta_a_hash == recs[1].theta_a_hash);
  }

  SUBCASE("without unlabeled data") {
    auto tc = toy_train(2);
    tc.unlabeled_enabled = false;
    auto recs = Trainer(ds, mc, tc).run();
    for (const auto& r : recs) {
      CHECK(r.loss_terms.count("ss_ce") == 0);
      CHECK(r.loss_terms.count("ce") == 1);
      CHECK(r.pseudo_accept_rate == -1.0);
    }
  }

  SUBCASE("everything off degenerates to plain supervised training") {
    auto tc = toy_train(2);
    tc.vat_enabled = false;
    tc.metric = "none";
    tc.unlabeled_enabled = false;
    auto recs = Trainer(ds, mc, tc).run();
    for (const auto& r : recs) {
      CHECK(r.loss_terms.size() == 2);
      CHECK(r.loss_terms.count("ce") == 1);
      CHECK(r.loss_terms.at("ce") == r.loss_terms.at("objective"));
      CHECK(r.sigma.empty());
    }
  }
}

// ---------------------------------------------------------------- reduction

TEST_CASE("tau=1 reduces a mixed step to the supervised objective exactly") {
  auto ds = toy_dataset();
  auto mc = toy_model();
  auto tc = toy_train(1);
  tc.schedule = "simultaneous";
  tc.vat_enabled = false;
  tc.metric = "center";
  tc.tau = 1.0;  // acceptance is strict, so nothing passes

  Trainer tr(ds, mc, tc);
  auto recs = tr.run();
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].pseudo_accept_rate == 0.0);

  // Replica of the same iteration built from supervised pieces only: the
  // same forward over both halves, but cross-entropy and center loss read
  // the labeled rows alone. With every pseudo-label rejected the trainer
  // must produce bit-identical updates.
  cvnet::Network net(mc);
  cvnet::FwdCtx probe;
  probe.training = false;
  probe.update_stats = false;
  probe.track_params = false;
  net.logits(Tensor::zeros({1, 2, ds.labeled[0].length()}), probe);
  Tensor centers = init_centers(net, ds, mc.num_classes);
  Tensor rho = Tensor::zeros({2}, true);
  rho.set_name("weights.sim.rho");
  gradcore::Adam opt_m(gradcore::AdamConfig{tc.lr_m, 0.9, 0.999, 1e-8});
  gradcore::Adam opt_a(gradcore::AdamConfig{resolved_lr_a(tc), 0.9, 0.999, 1e-8});

  for (const auto& pair : make_epoch_batches(ds, tc, 1)) {
    const int Bl = pair.labeled.dim(0);
    cvnet::FwdCtx ctx;
    Tensor x_all = gradcore::concat_rows(pair.labeled, pair.unlabeled);
    Tensor f_all = net.features(x_all, ctx);
    Tensor logits_all = net.logits_from_features(f_all, ctx);
    Tensor ce = losses::ce_loss(gradcore::slice_rows(logits_all, 0, Bl),
                                pair.labels);
    Tensor cl = losses::center_loss(gradcore::slice_rows(f_all, 0, Bl),
                                    pair.labels, centers);
    Tensor obj = losses::auto_weighted_sum({ce, cl}, rho);
    auto group = net.parameters();
    group.push_back(rho);
    for (auto& p : group) p.zero_grad();
    centers.zero_grad();
    gradcore::backward(obj);
    opt_m.step(group);
    opt_a.step(centers);
  }

  check_same_network(tr.network(), net);
  CHECK(tr.metric_params().values() == centers.values());
}

// ------------------------------------------------------------- convergence

TEST_CASE("supervised objective trends downward on the toy corpus") {
  auto ds = toy_dataset();
  auto tc = toy_train(6);
  tc.vat_enabled = false;
  tc.metric = "none";
  tc.unlabeled_enabled = false;
  auto recs = Trainer(ds, toy_model(), tc).run();
  const double first = recs.front().loss_terms.at("objective");
  const double last = recs.back().loss_terms.at("objective");
  CHECK(last < first);
}

// ------------------------------------------------------------- determinism

TEST_CASE("training is bit-deterministic for a fixed seed") {
  auto ds = toy_dataset();
  auto mc = toy_model();
  auto tc = toy_train(3);
  Trainer a(ds, mc, tc), b(ds, mc, tc);
  auto ra = a.run(), rb = b.run();
  REQUIRE(ra.size() == rb.size());
  for (size_t i = 0; i < ra.size(); ++i) CHECK(strip_wall(ra[i]) == strip_wall(rb[i]));
  check_same_network(a.network(), b.network());
  CHECK(a.metric_params().values() == b.metric_params().values());
}

// ------------------------------------------------------------------ resume

TEST_CASE("a resumed run is bit-identical to an uninterrupted one") {
  auto ds = toy_dataset();
  auto mc = toy_model();
  auto tc = toy_train(6);
  auto dir = temp_dir();
  const auto rep_full = (dir / "full.jsonl").string();
  const auto rep_split = (dir / "split.jsonl").string();
  const auto ckpt = (dir / "split.ckpt").string();

  Trainer a(ds, mc, tc);
  auto ra = a.run({rep_full, "", ""});
  REQUIRE(ra.size() == 6);

  Trainer b(ds, mc, tc);
  auto rb1 = b.run({rep_split, ckpt, ""}, 3);
  REQUIRE(rb1.size() == 3);

  Trainer c(ds, mc, tc);
  c.restore(ckpt);
  CHECK(c.next_iteration() == 4);
  auto rb2 = c.run({rep_split, "", ""});
  REQUIRE(rb2.size() == 3);

  for (int i = 0; i < 3; ++i) {
    CHECK(strip_wall(rb1[static_cast<size_t>(i)]) ==
          strip_wall(ra[static_cast<size_t>(i)]));
    CHECK(strip_wall(rb2[static_cast<size_t>(i)]) ==
          strip_wall(ra[static_cast<size_t>(i + 3)]));
  }
  check_same_network(a.network(), c.network());
  CHECK(a.metric_params().values() == c.metric_params().values());
  CHECK(a.best_val() == c.best_val());
  CHECK(a.best_iteration() == c.best_iteration());

  // the stitched report equals the uninterrupted one up to timing
  auto la = read_lines(rep_full), lb = read_lines(rep_split);
  REQUIRE(la.size() == lb.size());
  for (size_t i = 0; i < la.size(); ++i) {
    auto ja = nlohmann::json::parse(la[i]);
    auto jb = nlohmann::json::parse(lb[i]);
    ja.erase("wall_ms");
    jb.erase("wall_ms");
    CHECK(ja == jb);
  }
}

TEST_CASE("resume rejects mismatched configs and no-ops past the end") {
  auto ds = toy_dataset();
  auto mc = toy_model();
  auto tc = toy_train(3);
  auto dir = temp_dir();
  const auto ckpt = (dir / "guard.ckpt").string();

  Trainer a(ds, mc, tc);
  a.run({"", ckpt, ""});

  auto tc2 = tc;
  tc2.tau = 0.5;
  Trainer b(ds, mc, tc2);
  CHECK_THROWS_AS(b.restore(ckpt), ConfigMismatchError);

  Trainer c(ds, mc, tc);
  c.restore(ckpt);
  CHECK(c.next_iteration() == 4);
  CHECK(c.run().empty());

  CHECK_THROWS_AS(c.restore((dir / "definitely_absent.ckpt").string()),
                  FormatError);
}

// -------------------------------------------------------------- validation

TEST_CASE("best-checkpoint tracking follows strictly greater accuracy") {
  auto ds = toy_dataset();
  auto tc = toy_train(4);
  auto dir = temp_dir();
  const auto last = (dir / "last.ckpt").string();
  const auto best = (dir / "best.ckpt").string();

  Trainer tr(ds, toy_model(), tc);
  auto recs = tr.run({"", last, best});

  double best_val = -1.0;
  int64_t best_t = 0;
  for (const auto& r : recs)
    if (r.val_acc > best_val) {
      best_val = r.val_acc;
      best_t = r.t;
    }
  CHECK(tr.best_val() == best_val);
  CHECK(tr.best_iteration() == best_t);

  std::ifstream meta_in(best + ".meta.json");
  REQUIRE(bool(meta_in));
  auto meta = nlohmann::json::parse(meta_in);
  CHECK(meta.at("iteration").get<int64_t>() == best_t);
  CHECK(meta.at("best_val_acc").get<double>() == best_val);

  std::ifstream last_in(last + ".meta.json");
  REQUIRE(bool(last_in));
  auto last_meta = nlohmann::json::parse(last_in);
  CHECK(last_meta.at("iteration").get<int64_t>() == 4);
}
