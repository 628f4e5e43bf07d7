#include "mat/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "mat/ops.hpp"

namespace mat::losses {

using gradcore::BackwardPass;
using gradcore::make_op;
using gradcore::NodePtr;

namespace {

void check_labels(const std::vector<int>& labels, int K, const char* who) {
  for (int y : labels)
    if (y < 0 || y >= K)
      throw std::invalid_argument(std::string(who) + ": label " +
                                  std::to_string(y) + " outside [0," +
                                  std::to_string(K) + ")");
}

// sum_i w[i] * m(i, cols[i]) for m:[B,K]; the workhorse behind both CE terms.
Tensor picked_weighted_sum(const Tensor& m, std::vector<int> cols,
                           std::vector<double> w) {
  if (m.shape().size() != 2)
    throw std::invalid_argument("picked_weighted_sum: want [B,K]");
  int B = m.dim(0), K = m.dim(1);
  if (static_cast<int>(cols.size()) != B || w.size() != cols.size())
    throw std::invalid_argument("picked_weighted_sum: length mismatch");
  double acc = 0.0;
  for (int i = 0; i < B; ++i)
    acc += w[static_cast<size_t>(i)] *
           m.values()[static_cast<size_t>(i) * K + cols[static_cast<size_t>(i)]];
  NodePtr mn = m.node;
  return make_op({}, std::vector<double>{acc}, {m},
                 [mn, cols = std::move(cols), w = std::move(w),
                  K](const std::vector<double>& g, BackwardPass& pass) {
                   auto* gm = pass.buffer(mn);
                   if (!gm) return;
                   for (size_t i = 0; i < cols.size(); ++i)
                     (*gm)[i * K + cols[i]] += g[0] * w[i];
                 });
}

// (1/(2*denom)) sum_i w[i] ||z_i - c_{labels[i]}||^2 with gradients into both
// the feature rows and the indexed center rows.
Tensor weighted_center_sq(const Tensor& features, std::vector<int> labels,
                          const Tensor& centers, std::vector<double> w,
                          double denom) {
  if (features.shape().size() != 2 || centers.shape().size() != 2 ||
      features.dim(1) != centers.dim(1))
    throw std::invalid_argument("center_loss: want features [M,D], centers [K,D]");
  int M = features.dim(0), D = features.dim(1);
  if (static_cast<int>(labels.size()) != M || w.size() != labels.size())
    throw std::invalid_argument("center_loss: length mismatch");
  check_labels(labels, centers.dim(0), "center_loss");

  const double* z = features.data();
  const double* c = centers.data();
  double acc = 0.0;
  for (int i = 0; i < M; ++i) {
    if (w[static_cast<size_t>(i)] == 0.0) continue;
    const double* zi = z + static_cast<size_t>(i) * D;
    const double* ci = c + static_cast<size_t>(labels[static_cast<size_t>(i)]) * D;
    double sq = 0.0;
    for (int d = 0; d < D; ++d) {
      double diff = zi[d] - ci[d];
      sq += diff * diff;
    }
    acc += w[static_cast<size_t>(i)] * sq;
  }
  acc /= 2.0 * denom;

  NodePtr zn = features.node, cn = centers.node;
  return make_op(
      {}, std::vector<double>{acc}, {features, centers},
      [zn, cn, labels = std::move(labels), w = std::move(w), denom, D](
          const std::vector<double>& g, BackwardPass& pass) {
        auto* gz = pass.buffer(zn);
        auto* gc = pass.buffer(cn);
        if (!gz && !gc) return;
        const std::vector<double>& zv = *zn->values;
        const std::vector<double>& cv = *cn->values;
        for (size_t i = 0; i < labels.size(); ++i) {
          if (w[i] == 0.0) continue;
          double coef = g[0] * w[i] / denom;
          size_t zoff = i * D, coff = static_cast<size_t>(labels[i]) * D;
          for (int d = 0; d < D; ++d) {
            double diff = zv[zoff + d] - cv[coff + d];
            if (gz) (*gz)[zoff + d] += coef * diff;
            if (gc) (*gc)[coff + d] -= coef * diff;
          }
        }
      });
}

// Proxy-anchor terms from a cosine-similarity matrix S:[M,K]. Samples with
// mask[i]==0 are excluded everywhere. The positive term averages over the
// proxies that have at least one (masked-in) positive; the negative term
// averages over all K proxies. Exponents are bounded by alpha*(1+delta), so
// direct evaluation cannot overflow.
Tensor pa_terms(const Tensor& S, std::vector<int> labels,
                std::vector<uint8_t> mask, double alpha, double delta) {
  int M = S.dim(0), K = S.dim(1);
  std::vector<double> pos_sum(static_cast<size_t>(K), 0.0);
  std::vector<double> neg_sum(static_cast<size_t>(K), 0.0);
  std::vector<uint8_t> has_pos(static_cast<size_t>(K), 0);
  const double* s = S.data();
  for (int i = 0; i < M; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    int yi = labels[static_cast<size_t>(i)];
    has_pos[static_cast<size_t>(yi)] = 1;
    for (int k = 0; k < K; ++k) {
      double sik = s[static_cast<size_t>(i) * K + k];
      if (k == yi)
        pos_sum[static_cast<size_t>(k)] += std::exp(-alpha * (sik - delta));
      else
        neg_sum[static_cast<size_t>(k)] += std::exp(alpha * (sik + delta));
    }
  }
  int p_plus = 0;
  for (uint8_t h : has_pos) p_plus += h ? 1 : 0;
  double loss = 0.0;
  for (int k = 0; k < K; ++k) {
    if (has_pos[static_cast<size_t>(k)])
      loss += std::log1p(pos_sum[static_cast<size_t>(k)]) / p_plus;
    loss += std::log1p(neg_sum[static_cast<size_t>(k)]) / K;
  }

  NodePtr sn = S.node;
  return make_op(
      {}, std::vector<double>{loss}, {S},
      [sn, labels = std::move(labels), mask = std::move(mask),
       pos_sum = std::move(pos_sum), neg_sum = std::move(neg_sum), p_plus,
       alpha, delta, K](const std::vector<double>& g, BackwardPass& pass) {
        auto* gs = pass.buffer(sn);
        if (!gs) return;
        const std::vector<double>& sv = *sn->values;
        for (size_t i = 0; i < labels.size(); ++i) {
          if (!mask[i]) continue;
          for (int k = 0; k < K; ++k) {
            double sik = sv[i * K + k];
            double& slot = (*gs)[i * K + k];
            if (k == labels[i]) {
              double e = std::exp(-alpha * (sik - delta));
              slot += g[0] * (-alpha * e) / (p_plus * (1.0 + pos_sum[k]));
            } else {
              double e = std::exp(alpha * (sik + delta));
              slot += g[0] * (alpha * e) / (K * (1.0 + neg_sum[k]));
            }
          }
        }
      });
}

Tensor pa_over(const Tensor& features, const std::vector<int>& labels,
               const std::vector<uint8_t>& mask, const Tensor& proxies,
               double alpha, double delta) {
  if (features.shape().size() != 2 || proxies.shape().size() != 2 ||
      features.dim(1) != proxies.dim(1))
    throw std::invalid_argument(
        "proxy_anchor: want features [M,D], proxies [K,D]");
  check_labels(labels, proxies.dim(0), "proxy_anchor");
  Tensor S = gradcore::matmul_nt(gradcore::row_normalize(features),
                                 gradcore::row_normalize(proxies));
  return pa_terms(S, labels, mask, alpha, delta);
}

void check_pa_hypers(double alpha, double delta) {
  if (!(alpha > 0.0) || !(delta >= 0.0))
    throw std::invalid_argument("proxy_anchor: need alpha > 0, delta >= 0");
}

double row_l2(const double* v, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += v[i] * v[i];
  return std::sqrt(s);
}

}  // namespace

PseudoLabels compute_pseudo_labels(const Tensor& logits_ul, double tau) {
  if (tau < 0.0 || tau > 1.0)
    throw std::invalid_argument("compute_pseudo_labels: tau outside [0,1]");
  if (logits_ul.shape().size() != 2)
    throw std::invalid_argument("compute_pseudo_labels: want [U,K]");
  int U = logits_ul.dim(0), K = logits_ul.dim(1);
  PseudoLabels out;
  out.labels.resize(static_cast<size_t>(U));
  out.confidence.resize(static_cast<size_t>(U));
  out.accepted.resize(static_cast<size_t>(U));
  const double* v = logits_ul.data();
  for (int i = 0; i < U; ++i) {
    const double* row = v + static_cast<size_t>(i) * K;
    int best = 0;
    for (int k = 1; k < K; ++k)
      if (row[k] > row[best]) best = k;
    double denom = 0.0;
    for (int k = 0; k < K; ++k) denom += std::exp(row[k] - row[best]);
    double conf = 1.0 / denom;
    out.labels[static_cast<size_t>(i)] = best;
    out.confidence[static_cast<size_t>(i)] = conf;
    out.accepted[static_cast<size_t>(i)] = conf > tau ? 1 : 0;
  }
  return out;
}

Tensor ce_loss(const Tensor& logits_l, const std::vector<int>& labels_l) {
  if (logits_l.shape().size() != 2 || logits_l.dim(0) < 1)
    throw std::invalid_argument("ce_loss: want [L,K], L >= 1");
  int L = logits_l.dim(0);
  if (static_cast<int>(labels_l.size()) != L)
    throw std::invalid_argument("ce_loss: label count mismatch");
  check_labels(labels_l, logits_l.dim(1), "ce_loss");
  std::vector<double> w(static_cast<size_t>(L), -1.0 / L);
  return picked_weighted_sum(gradcore::log_softmax(logits_l), labels_l,
                             std::move(w));
}

Tensor ss_ce_loss(const Tensor& logits_l, const std::vector<int>& labels_l,
                  const Tensor& logits_ul, const PseudoLabels& pseudo) {
  Tensor labeled = ce_loss(logits_l, labels_l);
  if (!logits_ul.defined() || logits_ul.dim(0) == 0) return labeled;
  int U = logits_ul.dim(0);
  if (static_cast<int>(pseudo.labels.size()) != U ||
      pseudo.accepted.size() != pseudo.labels.size())
    throw std::invalid_argument("ss_ce_loss: pseudo-label count mismatch");
  if (pseudo.accepted_count() == 0) return labeled;
  check_labels(pseudo.labels, logits_ul.dim(1), "ss_ce_loss");
  std::vector<double> w(static_cast<size_t>(U), 0.0);
  for (int i = 0; i < U; ++i)
    if (pseudo.accepted[static_cast<size_t>(i)])
      w[static_cast<size_t>(i)] = -1.0 / U;
  return gradcore::add(labeled,
                       picked_weighted_sum(gradcore::log_softmax(logits_ul),
                                           pseudo.labels, std::move(w)));
}

Tensor center_loss(const Tensor& features_l, const std::vector<int>& labels_l,
                   const Tensor& centers) {
  if (!features_l.defined() || features_l.dim(0) < 1)
    throw std::invalid_argument("center_loss: want at least one sample");
  std::vector<double> w(labels_l.size(), 1.0);
  return weighted_center_sq(features_l, labels_l, centers, std::move(w),
                            static_cast<double>(features_l.dim(0)));
}

Tensor ss_center_loss(const Tensor& features_l,
                      const std::vector<int>& labels_l,
                      const Tensor& features_ul, const PseudoLabels& pseudo,
                      const Tensor& centers) {
  Tensor labeled = center_loss(features_l, labels_l, centers);
  if (!features_ul.defined() || features_ul.dim(0) == 0) return labeled;
  int U = features_ul.dim(0);
  if (static_cast<int>(pseudo.labels.size()) != U)
    throw std::invalid_argument("ss_center_loss: pseudo-label count mismatch");
  if (pseudo.accepted_count() == 0) return labeled;
  std::vector<double> w(static_cast<size_t>(U), 0.0);
  for (int i = 0; i < U; ++i)
    w[static_cast<size_t>(i)] =
        pseudo.accepted[static_cast<size_t>(i)] ? 1.0 : 0.0;
  return gradcore::add(labeled,
                       weighted_center_sq(features_ul, pseudo.labels, centers,
                                          std::move(w), U));
}

Tensor proxy_anchor_loss(const Tensor& features_l,
                         const std::vector<int>& labels_l,
                         const Tensor& proxies, double alpha, double delta) {
  check_pa_hypers(alpha, delta);
  if (!features_l.defined() || features_l.dim(0) < 1)
    throw std::invalid_argument("proxy_anchor: want at least one sample");
  if (static_cast<int>(labels_l.size()) != features_l.dim(0))
    throw std::invalid_argument("proxy_anchor: label count mismatch");
  std::vector<uint8_t> mask(labels_l.size(), 1);
  return pa_over(features_l, labels_l, mask, proxies, alpha, delta);
}

Tensor ss_proxy_anchor_loss(const Tensor& features_l,
                            const std::vector<int>& labels_l,
                            const Tensor& features_ul,
                            const PseudoLabels& pseudo, const Tensor& proxies,
                            double alpha, double delta) {
  check_pa_hypers(alpha, delta);
  bool has_l = features_l.defined() && features_l.dim(0) > 0;
  bool has_u = features_ul.defined() && features_ul.dim(0) > 0 &&
               pseudo.accepted_count() > 0;
  if (has_u &&
      static_cast<int>(pseudo.labels.size()) != features_ul.dim(0))
    throw std::invalid_argument(
        "ss_proxy_anchor_loss: pseudo-label count mismatch");
  if (!has_l && !has_u)
    throw std::invalid_argument("ss_proxy_anchor_loss: no contributing samples");

  Tensor total;
  if (has_l)
    total = proxy_anchor_loss(features_l, labels_l, proxies, alpha, delta);
  if (has_u) {
    Tensor unl =
        pa_over(features_ul, pseudo.labels, pseudo.accepted, proxies, alpha,
                delta);
    total = total.defined() ? gradcore::add(total, unl) : unl;
  }
  return total;
}

Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  if (p.shape().size() != 2 || p.shape() != q.shape())
    throw std::invalid_argument("kl_divergence: want matching [B,K]");
  int B = p.dim(0), K = p.dim(1);
  const double* pv = p.data();
  const double* qv = q.data();
  for (int b = 0; b < B; ++b) {
    double ps = 0.0, qs = 0.0;
    for (int k = 0; k < K; ++k) {
      ps += pv[static_cast<size_t>(b) * K + k];
      qs += qv[static_cast<size_t>(b) * K + k];
    }
    if (std::abs(ps - 1.0) > 1e-6 || std::abs(qs - 1.0) > 1e-6)
      throw std::invalid_argument("kl_divergence: row " + std::to_string(b) +
                                  " is not a distribution");
  }

  double acc = 0.0;
  for (size_t i = 0; i < p.values().size(); ++i) {
    double pi = pv[i];
    if (pi <= 1e-12) continue;
    double qi = std::max(qv[i], 1e-12);
    acc += pi * (std::log(pi) - std::log(qi));
  }
  acc /= B;

  NodePtr pn = p.node, qn = q.node;
  return make_op({}, std::vector<double>{acc}, {p, q},
                 [pn, qn, B](const std::vector<double>& g, BackwardPass& pass) {
                   auto* gp = pass.buffer(pn);
                   auto* gq = pass.buffer(qn);
                   if (!gp && !gq) return;
                   const std::vector<double>& pv = *pn->values;
                   const std::vector<double>& qv = *qn->values;
                   for (size_t i = 0; i < pv.size(); ++i) {
                     double pi = pv[i];
                     if (pi <= 1e-12) continue;
                     double qi = std::max(qv[i], 1e-12);
                     if (gp)
                       (*gp)[i] +=
                           g[0] * (std::log(pi) - std::log(qi) + 1.0) / B;
                     // clamped q is locally constant, so no gradient there
                     if (gq && qv[i] > 1e-12) (*gq)[i] -= g[0] * pi / (qi * B);
                   }
                 });
}

Tensor vat_perturbation(const LogitFn& f, const Tensor& batch, double epsilon,
                        double xi, int power_iters, Rng& rng) {
  Tensor q0 = gradcore::softmax(f(batch.detach(), false)).detach();
  return vat_perturbation(f, batch, epsilon, xi, power_iters, rng, q0);
}

Tensor vat_perturbation(const LogitFn& f, const Tensor& batch, double epsilon,
                        double xi, int power_iters, Rng& rng,
                        const Tensor& q0_constant) {
  if (!(epsilon > 0.0) || !(xi > 0.0) || power_iters < 1)
    throw std::invalid_argument(
        "vat_perturbation: need epsilon > 0, xi > 0, power_iters >= 1");
  int B = batch.dim(0);
  int per = batch.numel() / B;
  Tensor base = batch.detach();
  Tensor q0 = q0_constant.detach();

  std::vector<double> d(batch.values().size());
  for (auto& v : d) v = rng.normal();
  for (int i = 0; i < B; ++i) {
    double* row = d.data() + static_cast<size_t>(i) * per;
    double nrm = row_l2(row, per);
    if (nrm < 1e-300) {
      // all-zero draw cannot be normalized; fall back to a basis direction
      row[0] = 1.0;
      nrm = 1.0;
    }
    for (int j = 0; j < per; ++j) row[j] /= nrm;
  }

  for (int it = 0; it < power_iters; ++it) {
    Tensor dt = Tensor::from_data(batch.shape(), d, true);
    Tensor x1 = gradcore::add(base, gradcore::scale(dt, xi));
    Tensor q1 = gradcore::softmax(f(x1, false));
    std::vector<double> grad = gradcore::input_gradient(kl_divergence(q0, q1), dt);
    for (int i = 0; i < B; ++i) {
      double* row = grad.data() + static_cast<size_t>(i) * per;
      double nrm = row_l2(row, per);
      if (nrm < 1e-300) continue;  // flat direction: keep the current d row
      double* drow = d.data() + static_cast<size_t>(i) * per;
      for (int j = 0; j < per; ++j) drow[j] = row[j] / nrm;
    }
  }

  for (auto& v : d) v *= epsilon;
  return Tensor::from_data(batch.shape(), std::move(d));
}

Tensor lds(const LogitFn& f, const Tensor& batch, const Tensor& perturbation,
           const Tensor& q0_constant) {
  if (batch.shape() != perturbation.shape())
    throw std::invalid_argument("lds: perturbation shape mismatch");
  Tensor x1 = gradcore::add(batch.detach(), perturbation.detach());
  Tensor q1 = gradcore::softmax(f(x1, true));
  return kl_divergence(q0_constant.detach(), q1);
}

Tensor lds(const LogitFn& f, const Tensor& batch, const Tensor& perturbation) {
  Tensor q0 = gradcore::softmax(f(batch.detach(), false)).detach();
  return lds(f, batch, perturbation, q0);
}

Tensor vat_loss(const LogitFn& f, const Tensor& labeled_batch,
                const Tensor& unlabeled_batch, double epsilon, double xi,
                int power_iters, Rng& rng) {
  bool has_l = labeled_batch.defined() && labeled_batch.dim(0) > 0;
  bool has_u = unlabeled_batch.defined() && unlabeled_batch.dim(0) > 0;
  if (!has_l && !has_u)
    throw std::invalid_argument("vat_loss: both batches empty");
  Tensor all = has_l && has_u
                   ? gradcore::concat_rows(labeled_batch.detach(),
                                           unlabeled_batch.detach())
                   : (has_l ? labeled_batch : unlabeled_batch);
  Tensor pert = vat_perturbation(f, all, epsilon, xi, power_iters, rng);
  return lds(f, all, pert);
}

Tensor auto_weighted_sum(const std::vector<Tensor>& terms, const Tensor& rho) {
  if (terms.empty())
    throw std::invalid_argument("auto_weighted_sum: no terms");
  if (rho.numel() != static_cast<int>(terms.size()))
    throw std::invalid_argument(
        "auto_weighted_sum: one sigma parameter per term required");
  Tensor total;
  for (size_t i = 0; i < terms.size(); ++i) {
    Tensor ri = gradcore::select(rho, static_cast<int>(i));
    // L/(2 sigma^2) = L * exp(-2 rho) / 2; ln(1+sigma^2) = softplus(2 rho)
    Tensor weighted = gradcore::scale(
        gradcore::mul(terms[i], gradcore::exp_(gradcore::scale(ri, -2.0))),
        0.5);
    Tensor piece =
        gradcore::add(weighted, gradcore::softplus(gradcore::scale(ri, 2.0)));
    total = total.defined() ? gradcore::add(total, piece) : piece;
  }
  return total;
}

}  // namespace mat::losses
