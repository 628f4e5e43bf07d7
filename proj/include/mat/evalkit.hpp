#pragma once
// Read-only evaluation over a trained classifier: accuracy and confusion
// counts on a labeled partition, silhouette of the semantic features,
// pseudo-label quality diagnostics against held-back true labels, and a TSV
// export of embeddings for external projection tools. All forwards run in
// eval mode and leave the network's buffers untouched.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mat/cvnet.hpp"
#include "mat/sigkit.hpp"
#include "mat/tensor.hpp"

namespace mat::evalkit {

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::vector<int64_t>> confusion;  // [true][predicted]
  std::vector<double> per_class_recall;
  double silhouette = 0.0;
  std::optional<double> pseudo_label_accuracy;
};

void to_json(nlohmann::json& j, const EvalResult& r);

// Argmax class per sample (ties to the lowest index), eval-mode forward.
std::vector<int> predictions(cvnet::Network& net,
                             const std::vector<sigkit::IQSignal>& samples);

// Semantic features [M, D] of a partition, eval-mode forward.
gradcore::Tensor eval_features(cvnet::Network& net,
                               const std::vector<sigkit::IQSignal>& samples);

// Both throw std::invalid_argument on an empty or unlabeled partition.
double accuracy(cvnet::Network& net,
                const std::vector<sigkit::IQSignal>& test_set);
std::vector<std::vector<int64_t>> confusion(
    cvnet::Network& net, const std::vector<sigkit::IQSignal>& test_set);

// Mean silhouette with Euclidean distances: s_i = (b_i - a_i)/max(a_i, b_i)
// where a_i is the mean distance to the sample's own cluster (excluding
// itself) and b_i the smallest mean distance to any other cluster. Samples
// in singleton clusters score 0. Requires at least two samples and two
// distinct labels.
double silhouette(const gradcore::Tensor& features,
                  const std::vector<int>& labels);

// One header line ("f0".."f{D-1}", "label"), then one row per sample with
// the feature values and the sample's label (-1 when unlabeled). Values are
// printed with nine significant digits.
void export_embeddings(cvnet::Network& net,
                       const std::vector<sigkit::IQSignal>& partition,
                       const std::string& path);

struct PseudoQuality {
  double coverage = 0.0;  // accepted / total
  std::optional<double> accuracy_on_accepted;  // absent when none accepted
};

// Scores the confidence-gated pseudo-labels of an unlabeled partition
// against its held-back diagnostic labels.
PseudoQuality pseudo_label_quality(cvnet::Network& net,
                                   const std::vector<sigkit::IQSignal>& unlabeled,
                                   const std::vector<int>& diagnostic_labels,
                                   double tau);

// Full evaluation on the dataset's test partition; silhouette over its test
// features, pseudo-label quality included when diagnostic labels are
// available for the unlabeled partition.
EvalResult evaluate(cvnet::Network& net, const sigkit::Dataset& ds,
                    double tau);

}  // namespace mat::evalkit
