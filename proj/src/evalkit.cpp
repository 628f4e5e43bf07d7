#include "mat/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "mat/common.hpp"
#include "mat/losses.hpp"

namespace mat::evalkit {

using gradcore::Tensor;

namespace {

constexpr int kEvalChunk = 64;

cvnet::FwdCtx eval_ctx() {
  cvnet::FwdCtx ctx;
  ctx.training = false;
  ctx.update_stats = false;
  ctx.track_params = false;
  return ctx;
}

int argmax_row(const double* row, int k) {
  int arg = 0;
  for (int i = 1; i < k; ++i)
    if (row[i] > row[arg]) arg = i;
  return arg;
}

}  // namespace

void to_json(nlohmann::json& j, const EvalResult& r) {
  j = nlohmann::json{{"accuracy", r.accuracy},
                     {"confusion", r.confusion},
                     {"per_class_recall", r.per_class_recall},
                     {"silhouette", r.silhouette}};
  if (r.pseudo_label_accuracy)
    j["pseudo_label_accuracy"] = *r.pseudo_label_accuracy;
  else
    j["pseudo_label_accuracy"] = nullptr;
}

std::vector<int> predictions(cvnet::Network& net,
                             const std::vector<sigkit::IQSignal>& samples) {
  if (samples.empty())
    throw std::invalid_argument("predictions: empty partition");
  const auto ctx = eval_ctx();
  const int n = static_cast<int>(samples.size());
  std::vector<int> preds(static_cast<size_t>(n));
  for (int lo = 0; lo < n; lo += kEvalChunk) {
    const int hi = std::min(n, lo + kEvalChunk);
    std::vector<int> rows(static_cast<size_t>(hi - lo));
    std::iota(rows.begin(), rows.end(), lo);
    Tensor lg = net.logits(sigkit::batch_tensor(samples, rows), ctx);
    const int k = lg.dim(1);
    for (int i = 0; i < hi - lo; ++i)
      preds[static_cast<size_t>(lo + i)] =
          argmax_row(lg.data() + static_cast<size_t>(i) * k, k);
  }
  return preds;
}

gradcore::Tensor eval_features(cvnet::Network& net,
                               const std::vector<sigkit::IQSignal>& samples) {
  if (samples.empty())
    throw std::invalid_argument("eval_features: empty partition");
  const auto ctx = eval_ctx();
  const int n = static_cast<int>(samples.size());
  Tensor out;
  for (int lo = 0; lo < n; lo += kEvalChunk) {
    const int hi = std::min(n, lo + kEvalChunk);
    std::vector<int> rows(static_cast<size_t>(hi - lo));
    std::iota(rows.begin(), rows.end(), lo);
    Tensor f = net.features(sigkit::batch_tensor(samples, rows), ctx);
    out = out.defined() ? gradcore::concat_rows(out, f) : f;
  }
  return out.detach();
}

std::vector<std::vector<int64_t>> confusion(
    cvnet::Network& net, const std::vector<sigkit::IQSignal>& test_set) {
  if (test_set.empty())
    throw std::invalid_argument("confusion: empty test set");
  const int k = net.config().num_classes;
  std::vector<std::vector<int64_t>> counts(
      static_cast<size_t>(k), std::vector<int64_t>(static_cast<size_t>(k), 0));
  auto preds = predictions(net, test_set);
  for (size_t i = 0; i < test_set.size(); ++i) {
    if (!test_set[i].label)
      throw std::invalid_argument("confusion: test sample without a label");
    const int truth = *test_set[i].label;
    if (truth < 0 || truth >= k)
      throw std::invalid_argument("confusion: label out of range");
    counts[static_cast<size_t>(truth)][static_cast<size_t>(preds[i])] += 1;
  }
  return counts;
}

double accuracy(cvnet::Network& net,
                const std::vector<sigkit::IQSignal>& test_set) {
  auto counts = confusion(net, test_set);
  int64_t diag = 0, total = 0;
  for (size_t r = 0; r < counts.size(); ++r)
    for (size_t c = 0; c < counts[r].size(); ++c) {
      total += counts[r][c];
      if (r == c) diag += counts[r][c];
    }
  return static_cast<double>(diag) / static_cast<double>(total);
}

double silhouette(const gradcore::Tensor& features,
                  const std::vector<int>& labels) {
  if (!features.defined() || features.shape().size() != 2)
    throw std::invalid_argument("silhouette: features must be [M, D]");
  const int m = features.dim(0), d = features.dim(1);
  if (static_cast<size_t>(m) != labels.size())
    throw std::invalid_argument("silhouette: label count mismatch");
  if (m < 2) throw std::invalid_argument("silhouette: need at least 2 samples");

  std::vector<int> classes(labels);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.size() < 2)
    throw std::invalid_argument("silhouette: need at least 2 clusters");
  const int nc = static_cast<int>(classes.size());
  auto cluster_of = [&](int label) {
    return static_cast<int>(std::lower_bound(classes.begin(), classes.end(),
                                             label) -
                            classes.begin());
  };

  std::vector<int64_t> sizes(static_cast<size_t>(nc), 0);
  std::vector<int> cl(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    cl[static_cast<size_t>(i)] = cluster_of(labels[static_cast<size_t>(i)]);
    sizes[static_cast<size_t>(cl[static_cast<size_t>(i)])] += 1;
  }

  const double* x = features.data();
  double total = 0.0;
  std::vector<double> dist_sum(static_cast<size_t>(nc));
  for (int i = 0; i < m; ++i) {
    const int ci = cl[static_cast<size_t>(i)];
    if (sizes[static_cast<size_t>(ci)] == 1) continue;  // singleton scores 0

    std::fill(dist_sum.begin(), dist_sum.end(), 0.0);
    for (int j = 0; j < m; ++j) {
      if (j == i) continue;
      const double* xi = x + static_cast<size_t>(i) * d;
      const double* xj = x + static_cast<size_t>(j) * d;
      double acc = 0.0;
      for (int t = 0; t < d; ++t) {
        const double diff = xi[t] - xj[t];
        acc += diff * diff;
      }
      dist_sum[static_cast<size_t>(cl[static_cast<size_t>(j)])] +=
          std::sqrt(acc);
    }

    const double a = dist_sum[static_cast<size_t>(ci)] /
                     static_cast<double>(sizes[static_cast<size_t>(ci)] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < nc; ++c) {
      if (c == ci || sizes[static_cast<size_t>(c)] == 0) continue;
      b = std::min(b, dist_sum[static_cast<size_t>(c)] /
                          static_cast<double>(sizes[static_cast<size_t>(c)]));
    }
    const double denom = std::max(a, b);
    if (denom > 0.0) total += (b - a) / denom;
  }
  return total / static_cast<double>(m);
}

void export_embeddings(cvnet::Network& net,
                       const std::vector<sigkit::IQSignal>& partition,
                       const std::string& path) {
  if (partition.empty())
    throw std::invalid_argument("export_embeddings: empty partition");
  Tensor f = eval_features(net, partition);
  const int m = f.dim(0), d = f.dim(1);

  std::ofstream out(path);
  if (!out) throw FormatError("cannot open for writing: " + path);
  for (int t = 0; t < d; ++t) out << "f" << t << "\t";
  out << "label\n";
  char buf[32];
  for (int i = 0; i < m; ++i) {
    const double* row = f.data() + static_cast<size_t>(i) * d;
    for (int t = 0; t < d; ++t) {
      std::snprintf(buf, sizeof buf, "%.9g", row[t]);
      out << buf << "\t";
    }
    const auto& lbl = partition[static_cast<size_t>(i)].label;
    out << (lbl ? *lbl : -1) << "\n";
  }
  out.close();
  if (!out) throw FormatError("write failed: " + path);
}

PseudoQuality pseudo_label_quality(
    cvnet::Network& net, const std::vector<sigkit::IQSignal>& unlabeled,
    const std::vector<int>& diagnostic_labels, double tau) {
  if (unlabeled.empty())
    throw std::invalid_argument("pseudo_label_quality: empty partition");
  if (unlabeled.size() != diagnostic_labels.size())
    throw std::invalid_argument(
        "pseudo_label_quality: diagnostic label count mismatch");

  const auto ctx = eval_ctx();
  const int n = static_cast<int>(unlabeled.size());
  int64_t accepted = 0, correct = 0;
  for (int lo = 0; lo < n; lo += kEvalChunk) {
    const int hi = std::min(n, lo + kEvalChunk);
    std::vector<int> rows(static_cast<size_t>(hi - lo));
    std::iota(rows.begin(), rows.end(), lo);
    Tensor lg = net.logits(sigkit::batch_tensor(unlabeled, rows), ctx);
    auto pl = losses::compute_pseudo_labels(lg, tau);
    for (int i = 0; i < hi - lo; ++i) {
      if (!pl.accepted[static_cast<size_t>(i)]) continue;
      ++accepted;
      if (pl.labels[static_cast<size_t>(i)] ==
          diagnostic_labels[static_cast<size_t>(lo + i)])
        ++correct;
    }
  }

  PseudoQuality q;
  q.coverage = static_cast<double>(accepted) / static_cast<double>(n);
  if (accepted > 0)
    q.accuracy_on_accepted =
        static_cast<double>(correct) / static_cast<double>(accepted);
  return q;
}

EvalResult evaluate(cvnet::Network& net, const sigkit::Dataset& ds,
                    double tau) {
  EvalResult r;
  r.confusion = confusion(net, ds.test);
  const int k = static_cast<int>(r.confusion.size());
  int64_t diag = 0, total = 0;
  r.per_class_recall.assign(static_cast<size_t>(k), 0.0);
  for (int c = 0; c < k; ++c) {
    int64_t row = 0;
    for (int p = 0; p < k; ++p) {
      row += r.confusion[static_cast<size_t>(c)][static_cast<size_t>(p)];
      total += r.confusion[static_cast<size_t>(c)][static_cast<size_t>(p)];
    }
    diag += r.confusion[static_cast<size_t>(c)][static_cast<size_t>(c)];
    if (row > 0)
      r.per_class_recall[static_cast<size_t>(c)] =
          static_cast<double>(
              r.confusion[static_cast<size_t>(c)][static_cast<size_t>(c)]) /
          static_cast<double>(row);
  }
  r.accuracy = static_cast<double>(diag) / static_cast<double>(total);

  std::vector<int> test_labels;
  test_labels.reserve(ds.test.size());
  for (const auto& s : ds.test) test_labels.push_back(*s.label);
  r.silhouette = silhouette(eval_features(net, ds.test), test_labels);

  if (!ds.unlabeled.empty() &&
      ds.diagnostic_labels.size() == ds.unlabeled.size()) {
    auto q = pseudo_label_quality(net, ds.unlabeled, ds.diagnostic_labels, tau);
    r.pseudo_label_accuracy = q.accuracy_on_accepted;
  }
  return r;
}

}  // namespace mat::evalkit
