#pragma once
// Objective components for semi-supervised training: cross-entropy and its
// pseudo-label-gated extension, center and proxy-anchor metric losses with
// semi-supervised variants, KL divergence, virtual adversarial perturbation
// with the local-distributional-smoothness loss, and the learned combination
// of multiple terms.
//
// Conventions shared by every loss here:
//   - pseudo-labels and adversarial directions are stop-gradient quantities;
//   - the unlabeled contributions of SS-* losses divide by the full unlabeled
//     batch count, not just the accepted count;
//   - every loss returns a scalar graph node.

#include <cstdint>
#include <functional>
#include <vector>

#include "mat/common.hpp"
#include "mat/tensor.hpp"

namespace mat::losses {

using gradcore::Tensor;

struct PseudoLabels {
  std::vector<int> labels;         // argmax of softmax, ties to lowest index
  std::vector<double> confidence;  // max softmax probability per sample
  std::vector<uint8_t> accepted;   // confidence strictly above tau

  int accepted_count() const {
    int n = 0;
    for (uint8_t a : accepted) n += a ? 1 : 0;
    return n;
  }
};

// Softmax over detached logit values; no gradient flows through selection.
PseudoLabels compute_pseudo_labels(const Tensor& logits_ul, double tau);

// -(1/L) sum log softmax(logits)[i, y_i]
Tensor ce_loss(const Tensor& logits_l, const std::vector<int>& labels_l);

// ce_loss over the labeled rows plus the accepted unlabeled rows' CE against
// their pseudo-labels divided by the full unlabeled count U. Empty or fully
// rejected unlabeled input returns the labeled term alone.
Tensor ss_ce_loss(const Tensor& logits_l, const std::vector<int>& labels_l,
                  const Tensor& logits_ul, const PseudoLabels& pseudo);

// (1/2L) sum ||z_i - c_{y_i}||^2, differentiable in features and centers.
Tensor center_loss(const Tensor& features_l, const std::vector<int>& labels_l,
                   const Tensor& centers);

// center_loss over labeled plus (1/2U) sum over accepted unlabeled samples of
// the squared distance to their pseudo-label center.
Tensor ss_center_loss(const Tensor& features_l,
                      const std::vector<int>& labels_l,
                      const Tensor& features_ul, const PseudoLabels& pseudo,
                      const Tensor& centers);

// Cosine-similarity proxy anchor: the positive term averages over proxies
// whose class appears in the batch, the negative term averages over all
// proxies. Throws on zero-norm rows (cosine undefined).
Tensor proxy_anchor_loss(const Tensor& features_l,
                         const std::vector<int>& labels_l,
                         const Tensor& proxies, double alpha, double delta);

// proxy_anchor_loss over labeled plus the same two terms over the accepted
// unlabeled samples under their pseudo-labels. Either side may be empty
// (empty labeled side: pass an undefined tensor or zero labels).
Tensor ss_proxy_anchor_loss(const Tensor& features_l,
                            const std::vector<int>& labels_l,
                            const Tensor& features_ul,
                            const PseudoLabels& pseudo, const Tensor& proxies,
                            double alpha, double delta);

// Mean over rows of sum_k p log(p/q); terms with p <= 1e-12 contribute zero
// and q is clamped at 1e-12. Rows of both arguments must sum to 1 within
// 1e-6. Differentiable in both arguments.
Tensor kl_divergence(const Tensor& p, const Tensor& q);

// Model forward abstraction for the adversarial losses: maps an input batch
// to logits. `track_params` false must detach all parameters so only the
// input carries gradient.
using LogitFn = std::function<Tensor(const Tensor& x, bool track_params)>;

// Power-iteration estimate of the most KL-sensitive direction, returned with
// per-sample L2 norm exactly epsilon. All internals are constants w.r.t. the
// model parameters. A sample whose KL gradient vanishes keeps its random
// unit direction.
Tensor vat_perturbation(const LogitFn& f, const Tensor& batch, double epsilon,
                        double xi, int power_iters, Rng& rng);
// Variant taking the precomputed constant distribution q0 = softmax(f(x)),
// letting callers share one clean forward across perturbation and LDS.
Tensor vat_perturbation(const LogitFn& f, const Tensor& batch, double epsilon,
                        double xi, int power_iters, Rng& rng,
                        const Tensor& q0_constant);

// KL(q(x) || q(x + perturbation)) with the first argument held constant;
// differentiable w.r.t. model parameters through the second forward.
Tensor lds(const LogitFn& f, const Tensor& batch, const Tensor& perturbation);
// Variant taking the precomputed constant distribution q0 = softmax(f(x)),
// letting callers share one clean forward across several losses.
Tensor lds(const LogitFn& f, const Tensor& batch, const Tensor& perturbation,
           const Tensor& q0_constant);

// Mean LDS over the row-concatenation of both batches (either may be
// undefined/empty, not both).
Tensor vat_loss(const LogitFn& f, const Tensor& labeled_batch,
                const Tensor& unlabeled_batch, double epsilon, double xi,
                int power_iters, Rng& rng);

// sum_i [ L_i / (2 sigma_i^2) + ln(1 + sigma_i^2) ] with sigma_i = exp(rho[i]).
// rho is a learnable leaf with one entry per term.
Tensor auto_weighted_sum(const std::vector<Tensor>& terms, const Tensor& rho);

}  // namespace mat::losses
