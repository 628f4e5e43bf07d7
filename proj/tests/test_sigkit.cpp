#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mat/common.hpp"
#include "mat/sigkit.hpp"

using namespace mat::sigkit;
namespace fs = std::filesystem;

namespace {

double mean_component(const IQSignal& s, int comp) {
  double acc = 0.0;
  for (int t = 0; t < s.length(); ++t)
    acc += s.iq[static_cast<size_t>(t) * 2 + comp];
  return acc / s.length();
}

double power(const IQSignal& s) {
  double acc = 0.0;
  for (float v : s.iq) acc += static_cast<double>(v) * v;
  return acc / s.length();
}

fs::path temp_dir() {
  auto d = fs::temp_directory_path() / "sigkit_test";
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("profiles are deterministic, distinct, and scale linearly") {
  EmitterProfile a = make_profile(3, 99, 1.0);
  EmitterProfile b = make_profile(3, 99, 1.0);
  CHECK(a.iq_gain_imbalance == b.iq_gain_imbalance);
  CHECK(a.iq_phase_skew == b.iq_phase_skew);
  CHECK(a.dc_offset_i == b.dc_offset_i);
  CHECK(a.phase_noise_std == b.phase_noise_std);
  CHECK(a.pa_coeff3 == b.pa_coeff3);

  EmitterProfile other = make_profile(4, 99, 1.0);
  CHECK(a.iq_gain_imbalance != other.iq_gain_imbalance);

  EmitterProfile ideal = make_profile(3, 99, 0.0);
  CHECK(ideal.iq_gain_imbalance == 1.0);
  CHECK(ideal.iq_phase_skew == 0.0);
  CHECK(ideal.dc_offset_i == 0.0);
  CHECK(ideal.dc_offset_q == 0.0);
  CHECK(ideal.phase_noise_std == 0.0);
  CHECK(ideal.pa_coeff3 == 0.0);

  EmitterProfile twice = make_profile(3, 99, 2.0);
  CHECK(twice.iq_phase_skew == doctest::Approx(2.0 * a.iq_phase_skew));
  CHECK(twice.dc_offset_i == doctest::Approx(2.0 * a.dc_offset_i));
  CHECK(twice.dc_offset_q == doctest::Approx(2.0 * a.dc_offset_q));
  CHECK(twice.phase_noise_std == doctest::Approx(2.0 * a.phase_noise_std));
  CHECK(twice.pa_coeff3 == doctest::Approx(2.0 * a.pa_coeff3));
  CHECK(twice.iq_gain_imbalance - 1.0 ==
        doctest::Approx(2.0 * (a.iq_gain_imbalance - 1.0)));

  CHECK(a.iq_gain_imbalance > 0.0);
  CHECK(a.pa_coeff3 <= 0.0);
  CHECK(a.phase_noise_std >= 0.0);
  CHECK_THROWS_AS(make_profile(0, 1, -0.5), std::invalid_argument);
}

TEST_CASE("shaped baseband has roughly unit power and is reproducible") {
  auto s1 = shaped_baseband(123, 2048);
  auto s2 = shaped_baseband(123, 2048);
  REQUIRE(s1.size() == 2048);
  for (size_t i = 0; i < s1.size(); ++i) CHECK(s1[i] == s2[i]);

  double p = 0.0;
  for (const auto& v : s1) p += std::norm(v);
  p /= static_cast<double>(s1.size());
  CHECK(p == doctest::Approx(1.0).epsilon(0.08));

  auto other = shaped_baseband(124, 2048);
  CHECK(s1[0] != other[0]);
}

TEST_CASE("synthesis determinism and snr handling") {
  EmitterProfile p = make_profile(0, 7, 1.0);
  IQSignal a = synthesize_sample(p, 512, 15.0, 42);
  IQSignal b = synthesize_sample(p, 512, 15.0, 42);
  CHECK(a.iq == b.iq);

  IQSignal c = synthesize_sample(p, 512, 15.0, 43);
  CHECK(a.iq != c.iq);

  double inf = std::numeric_limits<double>::infinity();
  IQSignal clean = synthesize_sample(p, 512, inf, 42);
  IQSignal clean2 = synthesize_sample(p, 512, inf, 42);
  CHECK(clean.iq == clean2.iq);
  // noisy differs from clean for the same seed
  CHECK(clean.iq != a.iq);

  CHECK_THROWS_AS(synthesize_sample(p, 512, std::nan(""), 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(synthesize_sample(p, 512, -inf, 1), std::invalid_argument);
}

TEST_CASE("snr changes noise power as requested") {
  EmitterProfile p = make_profile(1, 7, 0.0);  // ideal chain isolates noise
  double inf = std::numeric_limits<double>::infinity();
  double excess5 = 0.0, excess15 = 0.0;
  int reps = 50;
  for (int i = 0; i < reps; ++i) {
    IQSignal clean = synthesize_sample(p, 1024, inf, 1000 + i);
    IQSignal at5 = synthesize_sample(p, 1024, 5.0, 1000 + i);
    IQSignal at15 = synthesize_sample(p, 1024, 15.0, 1000 + i);
    excess5 += power(at5) - power(clean);
    excess15 += power(at15) - power(clean);
  }
  excess5 /= reps;
  excess15 /= reps;
  // noise power ratio between 5 dB and 15 dB should be 10 dB = 10x
  CHECK(excess5 / excess15 == doctest::Approx(10.0).epsilon(0.15));
}

TEST_CASE("dc offset shows up in the sample mean at +inf snr") {
  // statistical form: averaged over many payloads the clean-signal mean
  // vanishes and the DC term remains
  EmitterProfile p;
  p.dc_offset_i = 0.05;
  p.dc_offset_q = -0.03;
  double inf = std::numeric_limits<double>::infinity();
  double mi = 0.0, mq = 0.0;
  int reps = 200;
  for (int i = 0; i < reps; ++i) {
    IQSignal s = synthesize_sample(p, 512, inf, 5000 + i);
    mi += mean_component(s, 0);
    mq += mean_component(s, 1);
  }
  mi /= reps;
  mq /= reps;
  CHECK(mi == doctest::Approx(0.05).epsilon(0.1));
  CHECK(mq == doctest::Approx(-0.03).epsilon(0.15));

  // frozen-seed form: a specific sample whose mean lands within 0.01
  bool found = false;
  for (uint64_t seed = 0; seed < 400 && !found; ++seed) {
    IQSignal s = synthesize_sample(p, 512, inf, seed);
    if (std::fabs(mean_component(s, 0) - 0.05) < 0.01 &&
        std::fabs(mean_component(s, 1) + 0.03) < 0.01)
      found = true;
  }
  CHECK(found);
}

TEST_CASE("gain imbalance scales the q branch") {
  EmitterProfile p;
  p.iq_gain_imbalance = 1.25;
  double inf = std::numeric_limits<double>::infinity();
  double vi = 0.0, vq = 0.0;
  for (int i = 0; i < 100; ++i) {
    IQSignal s = synthesize_sample(p, 1024, inf, 9000 + i);
    for (int t = 0; t < s.length(); ++t) {
      double iv = s.iq[static_cast<size_t>(t) * 2];
      double qv = s.iq[static_cast<size_t>(t) * 2 + 1];
      vi += iv * iv;
      vq += qv * qv;
    }
  }
  CHECK(std::sqrt(vq / vi) == doctest::Approx(1.25).epsilon(0.02));
}

TEST_CASE("build_dataset partition geometry") {
  DatasetConfig cfg;
  cfg.num_classes = 6;
  cfg.sample_length = 64;  // small for test speed
  cfg.per_class_count = 100;
  cfg.labeled_ratio = 0.10;
  cfg.test_per_class = 5;
  cfg.master_seed = 11;
  Dataset ds = build_dataset(cfg);

  CHECK(ds.labeled.size() + ds.validation.size() == 60);
  CHECK(ds.unlabeled.size() == 540);
  CHECK(ds.validation.size() == 18);
  CHECK(ds.test.size() == 30);
  CHECK(ds.diagnostic_labels.size() == ds.unlabeled.size());

  // stratification: labeled+validation per class differs by at most one
  std::vector<int> per_class(6, 0);
  for (const auto& s : ds.labeled) per_class[*s.label] += 1;
  for (const auto& s : ds.validation) per_class[*s.label] += 1;
  int lo = *std::min_element(per_class.begin(), per_class.end());
  int hi = *std::max_element(per_class.begin(), per_class.end());
  CHECK(hi - lo <= 1);
  CHECK(lo >= 1);

  for (const auto& s : ds.unlabeled) CHECK(!s.label.has_value());
  for (int d : ds.diagnostic_labels) {
    CHECK(d >= 0);
    CHECK(d < 6);
  }

  // determinism across rebuilds
  Dataset ds2 = build_dataset(cfg);
  REQUIRE(ds2.labeled.size() == ds.labeled.size());
  CHECK(ds2.labeled[0].iq == ds.labeled[0].iq);
  CHECK(ds2.unlabeled[17].iq == ds.unlabeled[17].iq);
  CHECK(ds2.test[3].iq == ds.test[3].iq);
}

TEST_CASE("build_dataset edge cases") {
  DatasetConfig cfg;
  cfg.num_classes = 4;
  cfg.sample_length = 32;
  cfg.per_class_count = 10;
  cfg.labeled_ratio = 1.0;
  cfg.test_per_class = 0;
  Dataset all = build_dataset(cfg);
  CHECK(all.unlabeled.empty());
  CHECK(all.diagnostic_labels.empty());
  CHECK(all.labeled.size() + all.validation.size() == 40);

  cfg.labeled_ratio = 0.05;  // 2 labeled over 4 classes -> impossible
  CHECK_THROWS_AS(build_dataset(cfg), std::invalid_argument);

  cfg.labeled_ratio = 0.0;
  CHECK_THROWS_AS(build_dataset(cfg), std::invalid_argument);
}

TEST_CASE("min-max normalization maps fit partitions into [0,1]") {
  DatasetConfig cfg;
  cfg.num_classes = 3;
  cfg.sample_length = 48;
  cfg.per_class_count = 12;
  cfg.labeled_ratio = 0.5;
  cfg.test_per_class = 4;
  cfg.master_seed = 3;
  Dataset ds = build_dataset(cfg);
  normalize_min_max(ds);

  CHECK(ds.normalized);
  CHECK(ds.norm_max > ds.norm_min);
  float lo = 1e30f, hi = -1e30f;
  for (const auto* part : {&ds.labeled, &ds.unlabeled})
    for (const auto& s : *part)
      for (float v : s.iq) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  CHECK(lo == 0.0f);  // extremes are attained exactly
  CHECK(hi == 1.0f);

  // validation/test share the transform (finite, near the unit box)
  for (const auto* part : {&ds.validation, &ds.test})
    for (const auto& s : *part)
      for (float v : s.iq) {
        CHECK(std::isfinite(v));
        CHECK(v > -0.5f);
        CHECK(v < 1.5f);
      }

  CHECK_THROWS_AS(normalize_min_max(ds), std::logic_error);
}

TEST_CASE("dataset save/load round trip is exact") {
  DatasetConfig cfg;
  cfg.num_classes = 3;
  cfg.sample_length = 40;
  cfg.per_class_count = 8;
  cfg.labeled_ratio = 0.5;
  cfg.test_per_class = 2;
  cfg.snr_db = 12.5;
  cfg.master_seed = 21;
  Dataset ds = build_dataset(cfg);
  normalize_min_max(ds);

  auto path = (temp_dir() / "roundtrip.matds").string();
  save_dataset(ds, path);
  Dataset back = load_dataset(path);

  CHECK(back.num_classes == ds.num_classes);
  CHECK(back.normalized == ds.normalized);
  CHECK(back.norm_min == ds.norm_min);
  CHECK(back.norm_max == ds.norm_max);
  CHECK(back.diagnostic_labels == ds.diagnostic_labels);
  CHECK(back.config.snr_db == ds.config.snr_db);
  CHECK(back.config.master_seed == ds.config.master_seed);
  CHECK(back.config.labeled_ratio == ds.config.labeled_ratio);

  REQUIRE(back.labeled.size() == ds.labeled.size());
  REQUIRE(back.unlabeled.size() == ds.unlabeled.size());
  REQUIRE(back.validation.size() == ds.validation.size());
  REQUIRE(back.test.size() == ds.test.size());
  for (size_t i = 0; i < ds.labeled.size(); ++i) {
    CHECK(back.labeled[i].iq == ds.labeled[i].iq);  // bit-exact f32
    CHECK(back.labeled[i].label == ds.labeled[i].label);
  }
  for (size_t i = 0; i < ds.unlabeled.size(); ++i) {
    CHECK(back.unlabeled[i].iq == ds.unlabeled[i].iq);
    CHECK(!back.unlabeled[i].label.has_value());
  }
  for (size_t i = 0; i < ds.test.size(); ++i)
    CHECK(back.test[i].label == ds.test[i].label);
}

TEST_CASE("dataset loader rejects corruption") {
  DatasetConfig cfg;
  cfg.num_classes = 2;
  cfg.sample_length = 16;
  cfg.per_class_count = 4;
  cfg.labeled_ratio = 1.0;
  cfg.test_per_class = 0;
  Dataset ds = build_dataset(cfg);
  auto dir = temp_dir();
  auto path = (dir / "corrupt.matds").string();
  save_dataset(ds, path);

  auto clone = [&](const std::string& name) {
    auto p = (dir / name).string();
    fs::copy_file(path, p, fs::copy_options::overwrite_existing);
    fs::copy_file(path + ".meta.json", p + ".meta.json",
                  fs::copy_options::overwrite_existing);
    return p;
  };

  // bad magic
  {
    auto p = clone("bad_magic.matds");
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXXXX", 6);
    f.close();
    CHECK_THROWS_AS(load_dataset(p), mat::FormatError);
  }
  // unsupported version
  {
    auto p = clone("bad_version.matds");
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(6);
    uint16_t v = 9;
    f.write(reinterpret_cast<char*>(&v), 2);
    f.close();
    CHECK_THROWS_AS(load_dataset(p), mat::VersionError);
  }
  // truncation
  {
    auto p = clone("trunc.matds");
    auto size = fs::file_size(p);
    fs::resize_file(p, size / 2);
    CHECK_THROWS_AS(load_dataset(p), mat::TruncationError);
  }
  // payload bit flip -> checksum
  {
    auto p = clone("flip.matds");
    auto size = fs::file_size(p);
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(static_cast<std::streamoff>(size / 2));
    char byte;
    f.read(&byte, 1);
    byte = static_cast<char>(byte ^ 0x40);
    f.seekp(static_cast<std::streamoff>(size / 2));
    f.write(&byte, 1);
    f.close();
    CHECK_THROWS_AS(load_dataset(p), mat::ChecksumError);
  }
}

TEST_CASE("raw iq manifest loading") {
  auto dir = temp_dir();
  // two tiny raw recordings, 8 samples each
  std::vector<float> rec1, rec2;
  for (int i = 0; i < 16; ++i) {
    rec1.push_back(static_cast<float>(i) * 0.1f);
    rec2.push_back(static_cast<float>(-i) * 0.05f);
  }
  {
    std::ofstream f1(dir / "rec1.bin", std::ios::binary);
    f1.write(reinterpret_cast<char*>(rec1.data()), rec1.size() * 4);
    std::ofstream f2(dir / "rec2.bin", std::ios::binary);
    f2.write(reinterpret_cast<char*>(rec2.data()), rec2.size() * 4);
  }
  {
    std::ofstream m(dir / "manifest.json");
    m << R"({
      "num_classes": 2,
      "sample_length": 8,
      "snr_db": 20.0,
      "partitions": {
        "labeled": [ {"file": "rec1.bin", "label": 0} ],
        "unlabeled": [ {"file": "rec2.bin", "label": 1} ],
        "test": [ {"file": "rec2.bin", "label": 1} ]
      }
    })";
  }
  Dataset ds = load_raw_iq((dir / "manifest.json").string());
  CHECK(ds.num_classes == 2);
  REQUIRE(ds.labeled.size() == 1);
  REQUIRE(ds.unlabeled.size() == 1);
  REQUIRE(ds.test.size() == 1);
  CHECK(ds.labeled[0].iq == rec1);
  CHECK(ds.labeled[0].label == 0);
  CHECK(!ds.unlabeled[0].label.has_value());
  CHECK(ds.diagnostic_labels == std::vector<int>{1});
  CHECK(ds.test[0].label == 1);
  CHECK(ds.config.snr_db == 20.0);

  // missing file and label errors
  {
    std::ofstream m(dir / "bad1.json");
    m << R"({"num_classes":2,"sample_length":8,
             "partitions":{"labeled":[{"file":"missing.bin","label":0}]}})";
  }
  CHECK_THROWS_AS(load_raw_iq((dir / "bad1.json").string()), mat::FormatError);
  {
    std::ofstream m(dir / "bad2.json");
    m << R"({"num_classes":2,"sample_length":8,
             "partitions":{"labeled":[{"file":"rec1.bin"}]}})";
  }
  CHECK_THROWS_AS(load_raw_iq((dir / "bad2.json").string()), mat::FormatError);
  {
    // too short for sample_length 32
    std::ofstream m(dir / "bad3.json");
    m << R"({"num_classes":2,"sample_length":32,
             "partitions":{"labeled":[{"file":"rec1.bin","label":0}]}})";
  }
  CHECK_THROWS_AS(load_raw_iq((dir / "bad3.json").string()),
                  mat::TruncationError);
}
