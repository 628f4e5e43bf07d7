#include "mat/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "mat/common.hpp"

namespace mat::gradcore {

namespace {

void require(bool ok, const char* msg) {
  if (!ok) throw std::invalid_argument(msg);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

int floor_div(int a, int b) {
  int q = a / b, r = a % b;
  return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}
int ceil_div(int a, int b) { return -floor_div(-a, b); }

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ------------------------------------------------------------ elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  size_t n = a.values().size();
  std::vector<double> out(n);
  const double *pa = a.data(), *pb = b.data();
  for (size_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
  NodePtr an = a.node, bn = b.node;
  return make_op(a.shape(), std::move(out), {a, b},
                 [an, bn](const std::vector<double>& g, BackwardPass& pass) {
                   if (auto* ga = pass.buffer(an))
                     for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                   if (auto* gb = pass.buffer(bn))
                     for (size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  size_t n = a.values().size();
  std::vector<double> out(n);
  const double *pa = a.data(), *pb = b.data();
  for (size_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i];
  NodePtr an = a.node, bn = b.node;
  return make_op(a.shape(), std::move(out), {a, b},
                 [an, bn](const std::vector<double>& g, BackwardPass& pass) {
                   if (auto* ga = pass.buffer(an))
                     for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                   if (auto* gb = pass.buffer(bn))
                     for (size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  size_t n = a.values().size();
  std::vector<double> out(n);
  const double *pa = a.data(), *pb = b.data();
  for (size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
  NodePtr an = a.node, bn = b.node;
  auto av = a.node->values, bv = b.node->values;
  return make_op(a.shape(), std::move(out), {a, b},
                 [an, bn, av, bv](const std::vector<double>& g,
                                  BackwardPass& pass) {
                   if (auto* ga = pass.buffer(an))
                     for (size_t i = 0; i < g.size(); ++i)
                       (*ga)[i] += g[i] * (*bv)[i];
                   if (auto* gb = pass.buffer(bn))
                     for (size_t i = 0; i < g.size(); ++i)
                       (*gb)[i] += g[i] * (*av)[i];
                 });
}

Tensor scale(const Tensor& a, double c) {
  size_t n = a.values().size();
  std::vector<double> out(n);
  const double* pa = a.data();
  for (size_t i = 0; i < n; ++i) out[i] = pa[i] * c;
  NodePtr an = a.node;
  return make_op(a.shape(), std::move(out), {a},
                 [an, c](const std::vector<double>& g, BackwardPass& pass) {
                   if (auto* ga = pass.buffer(an))
                     for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * c;
                 });
}

Tensor add_const(const Tensor& a, double c) {
  size_t n = a.values().size();
  std::vector<double> out(n);
  const double* pa = a.data();
  for (size_t i = 0; i < n; ++i) out[i] = pa[i] + c;
  NodePtr an = a.node;
  return make_op(a.shape(), std::move(out), {a},
                 [an](const std::vector<double>& g, BackwardPass& pass) {
                   if (auto* ga = pass.buffer(an))
                     for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                 });
}

Tensor exp_(const Tensor& a) {
  size_t n = a.values().size();
  auto out = std::make_shared<std::vector<double>>(n);
  const double* pa = a.data();
  for (size_t i = 0; i < n; ++i) (*out)[i] = std::exp(pa[i]);
  NodePtr an = a.node;
  auto ov = out;
  return make_op(a.shape(), std::move(out), {a},
                 [an, ov](const std::vector<double>& g, BackwardPass& pass) {
                   if (auto* ga = pass.buffer(an))
                     for (size_t i = 0; i < g.size(); ++i)
                       (*ga)[i] += g[i] * (*ov)[i];
                 });
}

Tensor log_(const Tensor& a) {
  size_t n = a.values().size();
  std::vector<double> out(n);
  const double* pa = a.data();
  for (size_t i = 0; i < n; ++i) out[i] = std::log(pa[i]);
  NodePtr an = a.node;
  auto av = a.node->values;
  return make_op(a.shape(), std::move(out), {a},
                 [an, av](const std::vector<double>& g, BackwardPass& pass) {
                   if (auto* ga = pass.buffer(an))
                     for (size_t i = 0; i < g.size(); ++i)
                       (*ga)[i] += g[i] / (*av)[i];
                 });
}

Tensor softplus(const Tensor& a) {
  size_t n = a.values().size();
  std::vector<double> out(n);
  const double* pa = a.data();
  for (size_t i = 0; i < n; ++i) {
    double x = pa[i];
    out[i] = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  }
  NodePtr an = a.node;
  auto av = a.node->values;
  return make_op(a.shape(), std::move(out), {a},
                 [an, av](const std::vector<double>& g, BackwardPass& pass) {
                   if (auto* ga = pass.buffer(an))
                     for (size_t i = 0; i < g.size(); ++i)
                       (*ga)[i] += g[i] * stable_sigmoid((*av)[i]);
                 });
}

Tensor relu(const Tensor& a) {
  size_t n = a.values().size();
  std::vector<double> out(n);
  const double* pa = a.data();
  for (size_t i = 0; i < n; ++i) out[i] = pa[i] > 0.0 ? pa[i] : 0.0;
  NodePtr an = a.node;
  auto av = a.node->values;
  return make_op(a.shape(), std::move(out), {a},
                 [an, av](const std::vector<double>& g, BackwardPass& pass) {
                   if (auto* ga = pass.buffer(an))
                     for (size_t i = 0; i < g.size(); ++i)
                       if ((*av)[i] > 0.0) (*ga)[i] += g[i];
                 });
}

// ---------------------------------------------------- reductions/indexing

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  NodePtr an = a.node;
  return make_op({}, {s}, {a},
                 [an](const std::vector<double>& g, BackwardPass& pass) {
                   if (auto* ga = pass.buffer(an))
                     for (auto& v : *ga) v += g[0];
                 });
}

Tensor mean(const Tensor& a) {
  require(a.numel() > 0, "mean: empty tensor");
  double s = 0.0;
  for (double v : a.values()) s += v;
  double inv = 1.0 / static_cast<double>(a.numel());
  NodePtr an = a.node;
  return make_op({}, {s * inv}, {a},
                 [an, inv](const std::vector<double>& g, BackwardPass& pass) {
                   if (auto* ga = pass.buffer(an))
                     for (auto& v : *ga) v += g[0] * inv;
                 });
}

Tensor select(const Tensor& a, int flat_index) {
  require(flat_index >= 0 && flat_index < a.numel(), "select: index out of range");
  NodePtr an = a.node;
  return make_op({}, {a.data()[flat_index]}, {a},
                 [an, flat_index](const std::vector<double>& g,
                                  BackwardPass& pass) {
                   if (auto* ga = pass.buffer(an)) (*ga)[flat_index] += g[0];
                 });
}

Tensor slice_rows(const Tensor& a, int row_begin, int row_end) {
  require(!a.shape().empty(), "slice_rows: scalar input");
  int B = a.dim(0);
  require(0 <= row_begin && row_begin <= row_end && row_end <= B,
          "slice_rows: bad range");
  int row = a.numel() / std::max(B, 1);
  std::vector<int> shape = a.shape();
  shape[0] = row_end - row_begin;
  std::vector<double> out(static_cast<size_t>(shape[0]) * row);
  std::copy_n(a.data() + static_cast<size_t>(row_begin) * row, out.size(),
              out.begin());
  NodePtr an = a.node;
  size_t off = static_cast<size_t>(row_begin) * row;
  return make_op(std::move(shape), std::move(out), {a},
                 [an, off](const std::vector<double>& g, BackwardPass& pass) {
                   if (auto* ga = pass.buffer(an))
                     for (size_t i = 0; i < g.size(); ++i)
                       (*ga)[off + i] += g[i];
                 });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  require(!a.shape().empty() && a.shape().size() == b.shape().size(),
          "concat_rows: rank mismatch");
  for (size_t i = 1; i < a.shape().size(); ++i)
    require(a.shape()[i] == b.shape()[i], "concat_rows: trailing dims differ");
  std::vector<int> shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<double> out;
  out.reserve(a.values().size() + b.values().size());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  NodePtr an = a.node, bn = b.node;
  size_t na = a.values().size();
  return make_op(std::move(shape), std::move(out), {a, b},
                 [an, bn, na](const std::vector<double>& g,
                              BackwardPass& pass) {
                   if (auto* ga = pass.buffer(an))
                     for (size_t i = 0; i < na; ++i) (*ga)[i] += g[i];
                   if (auto* gb = pass.buffer(bn))
                     for (size_t i = na; i < g.size(); ++i)
                       (*gb)[i - na] += g[i];
                 });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  int n = 1;
  for (int d : shape) n *= d;
  require(n == a.numel(), "reshape: element count mismatch");
  NodePtr an = a.node;
  return make_op(std::move(shape), a.node->values, {a},
                 [an](const std::vector<double>& g, BackwardPass& pass) {
                   if (auto* ga = pass.buffer(an))
                     for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                 });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2,
          "concat_cols: inputs must be rank 2");
  require(a.dim(0) == b.dim(0), "concat_cols: row counts differ");
  int B = a.dim(0), Da = a.dim(1), Db = b.dim(1);
  std::vector<double> out(static_cast<size_t>(B) * (Da + Db));
  for (int bi = 0; bi < B; ++bi) {
    std::copy_n(a.data() + static_cast<size_t>(bi) * Da, Da,
                out.data() + static_cast<size_t>(bi) * (Da + Db));
    std::copy_n(b.data() + static_cast<size_t>(bi) * Db, Db,
                out.data() + static_cast<size_t>(bi) * (Da + Db) + Da);
  }
  NodePtr an = a.node, bn = b.node;
  return make_op({B, Da + Db}, std::move(out), {a, b},
                 [an, bn, B, Da, Db](const std::vector<double>& g,
                                     BackwardPass& pass) {
                   if (auto* ga = pass.buffer(an))
                     for (int bi = 0; bi < B; ++bi)
                       for (int d = 0; d < Da; ++d)
                         (*ga)[static_cast<size_t>(bi) * Da + d] +=
                             g[static_cast<size_t>(bi) * (Da + Db) + d];
                   if (auto* gb = pass.buffer(bn))
                     for (int bi = 0; bi < B; ++bi)
                       for (int d = 0; d < Db; ++d)
                         (*gb)[static_cast<size_t>(bi) * Db + d] +=
                             g[static_cast<size_t>(bi) * (Da + Db) + Da + d];
                 });
}

Tensor slice_channels(const Tensor& x, int c0, int c1) {
  require(x.shape().size() == 3, "slice_channels: input must be [B,C,L]");
  int B = x.dim(0), C = x.dim(1), L = x.dim(2);
  require(0 <= c0 && c0 < c1 && c1 <= C, "slice_channels: bad range");
  int Cs = c1 - c0;
  std::vector<double> out(static_cast<size_t>(B) * Cs * L);
  for (int bi = 0; bi < B; ++bi)
    std::copy_n(x.data() + (static_cast<size_t>(bi) * C + c0) * L,
                static_cast<size_t>(Cs) * L,
                out.data() + static_cast<size_t>(bi) * Cs * L);
  NodePtr xn = x.node;
  return make_op({B, Cs, L}, std::move(out), {x},
                 [xn, B, C, L, c0, Cs](const std::vector<double>& g,
                                       BackwardPass& pass) {
                   auto* gx = pass.buffer(xn);
                   if (!gx) return;
                   for (int bi = 0; bi < B; ++bi) {
                     const double* gr = g.data() + static_cast<size_t>(bi) * Cs * L;
                     double* gxr =
                         gx->data() + (static_cast<size_t>(bi) * C + c0) * L;
                     for (int i = 0; i < Cs * L; ++i) gxr[i] += gr[i];
                   }
                 });
}

// -------------------------------------------------------- linear algebra

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.shape().size() == 2, "dense: x must be [B,Din]");
  require(w.shape().size() == 2, "dense: w must be [Dout,Din]");
  require(b.shape().size() == 1, "dense: b must be [Dout]");
  int B = x.dim(0), Din = x.dim(1), Dout = w.dim(0);
  require(w.dim(1) == Din, "dense: w/x inner dim mismatch");
  require(b.dim(0) == Dout, "dense: bias dim mismatch");

  std::vector<double> out(static_cast<size_t>(B) * Dout);
  {
    const double *xp = x.data(), *wp = w.data(), *bp = b.data();
    double* op = out.data();
    parallel_for(static_cast<size_t>(B), [&](size_t i0, size_t i1) {
      for (size_t bi = i0; bi < i1; ++bi) {
        const double* xr = xp + bi * Din;
        double* orow = op + bi * Dout;
        for (int o = 0; o < Dout; ++o) {
          const double* wr = wp + static_cast<size_t>(o) * Din;
          double acc = bp[o];
          for (int d = 0; d < Din; ++d) acc += xr[d] * wr[d];
          orow[o] = acc;
        }
      }
    });
  }

  NodePtr xn = x.node, wn = w.node, bn = b.node;
  auto xv = x.node->values, wv = w.node->values;
  return make_op(
      {B, Dout}, std::move(out), {x, w, b},
      [xn, wn, bn, xv, wv, B, Din, Dout](const std::vector<double>& g,
                                         BackwardPass& pass) {
        const double* wp = wv->data();
        const double* xp = xv->data();
        if (auto* gx = pass.buffer(xn)) {
          double* gxp = gx->data();
          parallel_for(static_cast<size_t>(B), [&](size_t i0, size_t i1) {
            for (size_t bi = i0; bi < i1; ++bi) {
              const double* gr = g.data() + bi * Dout;
              double* gxr = gxp + bi * Din;
              for (int o = 0; o < Dout; ++o) {
                double gv = gr[o];
                if (gv == 0.0) continue;
                const double* wr = wp + static_cast<size_t>(o) * Din;
                for (int d = 0; d < Din; ++d) gxr[d] += gv * wr[d];
              }
            }
          });
        }
        // Weight/bias grads reduce over the batch serially in index order.
        if (auto* gw = pass.buffer(wn)) {
          double* gwp = gw->data();
          for (int bi = 0; bi < B; ++bi) {
            const double* gr = g.data() + static_cast<size_t>(bi) * Dout;
            const double* xr = xp + static_cast<size_t>(bi) * Din;
            for (int o = 0; o < Dout; ++o) {
              double gv = gr[o];
              if (gv == 0.0) continue;
              double* gwr = gwp + static_cast<size_t>(o) * Din;
              for (int d = 0; d < Din; ++d) gwr[d] += gv * xr[d];
            }
          }
        }
        if (auto* gb = pass.buffer(bn)) {
          for (int bi = 0; bi < B; ++bi) {
            const double* gr = g.data() + static_cast<size_t>(bi) * Dout;
            for (int o = 0; o < Dout; ++o) (*gb)[o] += gr[o];
          }
        }
      });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2,
          "matmul_nt: inputs must be rank 2");
  int M = a.dim(0), D = a.dim(1), N = b.dim(0);
  require(b.dim(1) == D, "matmul_nt: inner dims differ");
  std::vector<double> out(static_cast<size_t>(M) * N);
  const double *ap = a.data(), *bp = b.data();
  for (int m = 0; m < M; ++m) {
    const double* ar = ap + static_cast<size_t>(m) * D;
    for (int n = 0; n < N; ++n) {
      const double* br = bp + static_cast<size_t>(n) * D;
      double acc = 0.0;
      for (int d = 0; d < D; ++d) acc += ar[d] * br[d];
      out[static_cast<size_t>(m) * N + n] = acc;
    }
  }
  NodePtr an = a.node, bn = b.node;
  auto av = a.node->values, bv = b.node->values;
  return make_op({M, N}, std::move(out), {a, b},
                 [an, bn, av, bv, M, N, D](const std::vector<double>& g,
                                           BackwardPass& pass) {
                   if (auto* ga = pass.buffer(an)) {
                     for (int m = 0; m < M; ++m) {
                       double* gar = ga->data() + static_cast<size_t>(m) * D;
                       const double* gr = g.data() + static_cast<size_t>(m) * N;
                       for (int n = 0; n < N; ++n) {
                         double gv = gr[n];
                         if (gv == 0.0) continue;
                         const double* br = bv->data() + static_cast<size_t>(n) * D;
                         for (int d = 0; d < D; ++d) gar[d] += gv * br[d];
                       }
                     }
                   }
                   if (auto* gb = pass.buffer(bn)) {
                     for (int m = 0; m < M; ++m) {
                       const double* ar = av->data() + static_cast<size_t>(m) * D;
                       const double* gr = g.data() + static_cast<size_t>(m) * N;
                       for (int n = 0; n < N; ++n) {
                         double gv = gr[n];
                         if (gv == 0.0) continue;
                         double* gbr = gb->data() + static_cast<size_t>(n) * D;
                         for (int d = 0; d < D; ++d) gbr[d] += gv * ar[d];
                       }
                     }
                   }
                 });
}

Tensor row_normalize(const Tensor& a) {
  require(a.shape().size() == 2, "row_normalize: input must be [M,D]");
  int M = a.dim(0), D = a.dim(1);
  std::vector<double> out(a.values().size());
  std::vector<double> inv_norm(static_cast<size_t>(M));
  const double* ap = a.data();
  for (int m = 0; m < M; ++m) {
    const double* ar = ap + static_cast<size_t>(m) * D;
    double ss = 0.0;
    for (int d = 0; d < D; ++d) ss += ar[d] * ar[d];
    double norm = std::sqrt(ss);
    if (norm < 1e-12)
      throw std::invalid_argument("row_normalize: row norm below 1e-12");
    inv_norm[m] = 1.0 / norm;
    double* orow = out.data() + static_cast<size_t>(m) * D;
    for (int d = 0; d < D; ++d) orow[d] = ar[d] * inv_norm[m];
  }
  NodePtr an = a.node;
  auto ov = std::make_shared<std::vector<double>>(out);
  return make_op({M, D}, std::move(out), {a},
                 [an, ov, inv = std::move(inv_norm), M, D](
                     const std::vector<double>& g, BackwardPass& pass) {
                   auto* ga = pass.buffer(an);
                   if (!ga) return;
                   for (int m = 0; m < M; ++m) {
                     const double* u = ov->data() + static_cast<size_t>(m) * D;
                     const double* gr = g.data() + static_cast<size_t>(m) * D;
                     double* gar = ga->data() + static_cast<size_t>(m) * D;
                     double ug = 0.0;
                     for (int d = 0; d < D; ++d) ug += u[d] * gr[d];
                     for (int d = 0; d < D; ++d)
                       gar[d] += (gr[d] - u[d] * ug) * inv[m];
                   }
                 });
}

// ------------------------------------------------------------- neural net

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int padding) {
  require(x.shape().size() == 3, "conv1d: x must be [B,Cin,L]");
  require(w.shape().size() == 3, "conv1d: w must be [Cout,Cin,K]");
  require(b.shape().size() == 1, "conv1d: b must be [Cout]");
  require(stride >= 1, "conv1d: stride must be >= 1");
  require(padding >= 0, "conv1d: padding must be >= 0");
  int B = x.dim(0), Cin = x.dim(1), L = x.dim(2);
  int Cout = w.dim(0), K = w.dim(2);
  require(w.dim(1) == Cin, "conv1d: channel mismatch");
  require(b.dim(0) == Cout, "conv1d: bias dim mismatch");
  require(L + 2 * padding >= K, "conv1d: kernel larger than padded input");
  int Lout = (L + 2 * padding - K) / stride + 1;

  std::vector<double> out(static_cast<size_t>(B) * Cout * Lout);
  const double *xp = x.data(), *wp = w.data(), *bp = b.data();
  double* op = out.data();
  parallel_for(static_cast<size_t>(B), [&](size_t i0, size_t i1) {
    for (size_t bi = i0; bi < i1; ++bi) {
      for (int co = 0; co < Cout; ++co) {
        double* orow = op + (bi * Cout + co) * Lout;
        std::fill_n(orow, Lout, bp[co]);
        for (int ci = 0; ci < Cin; ++ci) {
          const double* xr = xp + (bi * Cin + ci) * L;
          const double* wr = wp + (static_cast<size_t>(co) * Cin + ci) * K;
          for (int k = 0; k < K; ++k) {
            double wval = wr[k];
            if (wval == 0.0) continue;
            // valid lo range so that li = lo*stride + k - padding in [0, L)
            int lo0 = std::max(0, ceil_div(padding - k, stride));
            int lo1 = std::min(Lout, floor_div(L - 1 - k + padding, stride) + 1);
            if (stride == 1) {
              const double* xs = xr + (lo0 + k - padding);
              for (int lo = lo0; lo < lo1; ++lo)
                orow[lo] += wval * xs[lo - lo0];
            } else {
              for (int lo = lo0; lo < lo1; ++lo)
                orow[lo] += wval * xr[lo * stride + k - padding];
            }
          }
        }
      }
    }
  });

  NodePtr xn = x.node, wn = w.node, bn = b.node;
  auto xv = x.node->values, wv = w.node->values;
  return make_op(
      {B, Cout, Lout}, std::move(out), {x, w, b},
      [xn, wn, bn, xv, wv, B, Cin, L, Cout, K, Lout, stride, padding](
          const std::vector<double>& g, BackwardPass& pass) {
        const double* wp = wv->data();
        const double* xp = xv->data();
        if (auto* gx = pass.buffer(xn)) {
          double* gxp = gx->data();
          parallel_for(static_cast<size_t>(B), [&](size_t i0, size_t i1) {
            for (size_t bi = i0; bi < i1; ++bi) {
              for (int ci = 0; ci < Cin; ++ci) {
                double* gxr = gxp + (bi * Cin + ci) * L;
                for (int co = 0; co < Cout; ++co) {
                  const double* gr = g.data() + (bi * Cout + co) * Lout;
                  const double* wr =
                      wp + (static_cast<size_t>(co) * Cin + ci) * K;
                  for (int k = 0; k < K; ++k) {
                    double wval = wr[k];
                    if (wval == 0.0) continue;
                    int lo0 = std::max(0, ceil_div(padding - k, stride));
                    int lo1 =
                        std::min(Lout, floor_div(L - 1 - k + padding, stride) + 1);
                    if (stride == 1) {
                      double* gxs = gxr + (lo0 + k - padding);
                      for (int lo = lo0; lo < lo1; ++lo)
                        gxs[lo - lo0] += wval * gr[lo];
                    } else {
                      for (int lo = lo0; lo < lo1; ++lo)
                        gxr[lo * stride + k - padding] += wval * gr[lo];
                    }
                  }
                }
              }
            }
          });
        }
        if (auto* gw = pass.buffer(wn)) {
          double* gwp = gw->data();
          for (int bi = 0; bi < B; ++bi) {  // fixed-order batch reduction
            for (int co = 0; co < Cout; ++co) {
              const double* gr =
                  g.data() + (static_cast<size_t>(bi) * Cout + co) * Lout;
              for (int ci = 0; ci < Cin; ++ci) {
                const double* xr = xp + (static_cast<size_t>(bi) * Cin + ci) * L;
                double* gwr = gwp + (static_cast<size_t>(co) * Cin + ci) * K;
                for (int k = 0; k < K; ++k) {
                  int lo0 = std::max(0, ceil_div(padding - k, stride));
                  int lo1 =
                      std::min(Lout, floor_div(L - 1 - k + padding, stride) + 1);
                  double acc = 0.0;
                  if (stride == 1) {
                    const double* xs = xr + (lo0 + k - padding);
                    for (int lo = lo0; lo < lo1; ++lo)
                      acc += gr[lo] * xs[lo - lo0];
                  } else {
                    for (int lo = lo0; lo < lo1; ++lo)
                      acc += gr[lo] * xr[lo * stride + k - padding];
                  }
                  gwr[k] += acc;
                }
              }
            }
          }
        }
        if (auto* gb = pass.buffer(bn)) {
          for (int bi = 0; bi < B; ++bi) {
            for (int co = 0; co < Cout; ++co) {
              const double* gr =
                  g.data() + (static_cast<size_t>(bi) * Cout + co) * Lout;
              double acc = 0.0;
              for (int lo = 0; lo < Lout; ++lo) acc += gr[lo];
              (*gb)[co] += acc;
            }
          }
        }
      });
}

Tensor maxpool1d(const Tensor& x, int window) {
  require(x.shape().size() == 3, "maxpool1d: x must be [B,C,L]");
  require(window >= 1, "maxpool1d: window must be >= 1");
  int B = x.dim(0), C = x.dim(1), L = x.dim(2);
  int Lout = (L + window - 1) / window;
  std::vector<double> out(static_cast<size_t>(B) * C * Lout);
  std::vector<int32_t> arg(out.size());
  const double* xp = x.data();
  for (int bc = 0; bc < B * C; ++bc) {
    const double* xr = xp + static_cast<size_t>(bc) * L;
    double* orow = out.data() + static_cast<size_t>(bc) * Lout;
    int32_t* ar = arg.data() + static_cast<size_t>(bc) * Lout;
    for (int j = 0; j < Lout; ++j) {
      int l0 = j * window, l1 = std::min(L, l0 + window);
      // tail window is implicitly padded with -inf; ties keep the earliest
      double best = xr[l0];
      int besti = l0;
      for (int l = l0 + 1; l < l1; ++l)
        if (xr[l] > best) {
          best = xr[l];
          besti = l;
        }
      orow[j] = best;
      ar[j] = besti;
    }
  }
  NodePtr xn = x.node;
  return make_op({B, C, Lout}, std::move(out), {x},
                 [xn, arg = std::move(arg), L, Lout, BC = B * C](
                     const std::vector<double>& g, BackwardPass& pass) {
                   auto* gx = pass.buffer(xn);
                   if (!gx) return;
                   for (int bc = 0; bc < BC; ++bc) {
                     double* gxr = gx->data() + static_cast<size_t>(bc) * L;
                     const double* gr = g.data() + static_cast<size_t>(bc) * Lout;
                     const int32_t* ar = arg.data() + static_cast<size_t>(bc) * Lout;
                     for (int j = 0; j < Lout; ++j) gxr[ar[j]] += gr[j];
                   }
                 });
}

Tensor batchnorm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   Tensor running_mean, Tensor running_var,
                   const BatchNormOpts& opts) {
  size_t rank = x.shape().size();
  require(rank == 2 || rank == 3, "batchnorm1d: x must be [B,C] or [B,C,L]");
  int B = x.dim(0), C = x.dim(1), L = rank == 3 ? x.dim(2) : 1;
  require(gamma.shape().size() == 1 && gamma.dim(0) == C,
          "batchnorm1d: gamma must be [C]");
  require(beta.shape().size() == 1 && beta.dim(0) == C,
          "batchnorm1d: beta must be [C]");
  require(running_mean.numel() == C && running_var.numel() == C,
          "batchnorm1d: running stats must be [C]");
  if (opts.training && B == 1)
    throw std::invalid_argument(
        "batchnorm1d: training mode requires batch size >= 2");

  int N = B * L;
  std::vector<double> mu(C), invstd(C);
  const double* xp = x.data();
  if (opts.training) {
    std::vector<double> var(C);
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int bi = 0; bi < B; ++bi) {
        const double* xr = xp + (static_cast<size_t>(bi) * C + c) * L;
        for (int l = 0; l < L; ++l) s += xr[l];
      }
      mu[c] = s / N;
      double ss = 0.0;
      for (int bi = 0; bi < B; ++bi) {
        const double* xr = xp + (static_cast<size_t>(bi) * C + c) * L;
        for (int l = 0; l < L; ++l) {
          double d = xr[l] - mu[c];
          ss += d * d;
        }
      }
      var[c] = ss / N;  // biased, used for normalization
      invstd[c] = 1.0 / std::sqrt(var[c] + opts.eps);
    }
    if (opts.update_running) {
      double* rm = running_mean.data();
      double* rv = running_var.data();
      double m = opts.momentum;
      for (int c = 0; c < C; ++c) {
        rm[c] = (1.0 - m) * rm[c] + m * mu[c];
        rv[c] = (1.0 - m) * rv[c] +
                m * var[c] * static_cast<double>(N) / (N - 1);  // unbiased
      }
    }
  } else {
    const double* rm = running_mean.data();
    const double* rv = running_var.data();
    for (int c = 0; c < C; ++c) {
      mu[c] = rm[c];
      invstd[c] = 1.0 / std::sqrt(rv[c] + opts.eps);
    }
  }

  std::vector<double> out(x.values().size());
  const double *gp = gamma.data(), *bp = beta.data();
  for (int bi = 0; bi < B; ++bi) {
    for (int c = 0; c < C; ++c) {
      const double* xr = xp + (static_cast<size_t>(bi) * C + c) * L;
      double* orow = out.data() + (static_cast<size_t>(bi) * C + c) * L;
      double a = gp[c] * invstd[c];
      double o = bp[c] - a * mu[c];
      for (int l = 0; l < L; ++l) orow[l] = a * xr[l] + o;
    }
  }

  NodePtr xn = x.node, gn = gamma.node, bn = beta.node;
  auto xv = x.node->values, gv = gamma.node->values;
  bool training = opts.training;
  return make_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, xv, gv, mu = std::move(mu), invstd = std::move(invstd), B, C,
       L, N, training](const std::vector<double>& g, BackwardPass& pass) {
        const double* xp = xv->data();
        const double* gammap = gv->data();
        auto* gx = pass.buffer(xn);
        auto* gg = pass.buffer(gn);
        auto* gb = pass.buffer(bn);
        for (int c = 0; c < C; ++c) {
          // channel sums in fixed (bi, l) order
          double s0 = 0.0, s1 = 0.0;
          for (int bi = 0; bi < B; ++bi) {
            const double* xr = xp + (static_cast<size_t>(bi) * C + c) * L;
            const double* gr = g.data() + (static_cast<size_t>(bi) * C + c) * L;
            for (int l = 0; l < L; ++l) {
              s0 += gr[l];
              s1 += gr[l] * (xr[l] - mu[c]);
            }
          }
          if (gg) (*gg)[c] += s1 * invstd[c];
          if (gb) (*gb)[c] += s0;
          if (gx) {
            double a = gammap[c] * invstd[c];
            if (training) {
              double inv_n = 1.0 / N;
              double k1 = s0 * inv_n;
              double k2 = s1 * invstd[c] * invstd[c] * inv_n;
              for (int bi = 0; bi < B; ++bi) {
                const double* xr = xp + (static_cast<size_t>(bi) * C + c) * L;
                const double* gr =
                    g.data() + (static_cast<size_t>(bi) * C + c) * L;
                double* gxr =
                    gx->data() + (static_cast<size_t>(bi) * C + c) * L;
                for (int l = 0; l < L; ++l)
                  gxr[l] += a * (gr[l] - k1 - (xr[l] - mu[c]) * k2);
              }
            } else {
              for (int bi = 0; bi < B; ++bi) {
                const double* gr =
                    g.data() + (static_cast<size_t>(bi) * C + c) * L;
                double* gxr =
                    gx->data() + (static_cast<size_t>(bi) * C + c) * L;
                for (int l = 0; l < L; ++l) gxr[l] += a * gr[l];
              }
            }
          }
        }
      });
}

// ----------------------------------------------------------------- softmax

Tensor softmax(const Tensor& x) {
  require(x.shape().size() == 2, "softmax: input must be [B,K]");
  int B = x.dim(0), K = x.dim(1);
  auto out = std::make_shared<std::vector<double>>(x.values().size());
  const double* xp = x.data();
  for (int bi = 0; bi < B; ++bi) {
    const double* xr = xp + static_cast<size_t>(bi) * K;
    double* orow = out->data() + static_cast<size_t>(bi) * K;
    double m = xr[0];
    for (int k = 1; k < K; ++k) m = std::max(m, xr[k]);
    double s = 0.0;
    for (int k = 0; k < K; ++k) {
      orow[k] = std::exp(xr[k] - m);
      s += orow[k];
    }
    double inv = 1.0 / s;
    for (int k = 0; k < K; ++k) orow[k] *= inv;
  }
  NodePtr xn = x.node;
  auto ov = out;
  return make_op({B, K}, std::move(out), {x},
                 [xn, ov, B, K](const std::vector<double>& g,
                                BackwardPass& pass) {
                   auto* gx = pass.buffer(xn);
                   if (!gx) return;
                   for (int bi = 0; bi < B; ++bi) {
                     const double* y = ov->data() + static_cast<size_t>(bi) * K;
                     const double* gr = g.data() + static_cast<size_t>(bi) * K;
                     double* gxr = gx->data() + static_cast<size_t>(bi) * K;
                     double dot = 0.0;
                     for (int k = 0; k < K; ++k) dot += gr[k] * y[k];
                     for (int k = 0; k < K; ++k)
                       gxr[k] += y[k] * (gr[k] - dot);
                   }
                 });
}

Tensor log_softmax(const Tensor& x) {
  require(x.shape().size() == 2, "log_softmax: input must be [B,K]");
  int B = x.dim(0), K = x.dim(1);
  auto out = std::make_shared<std::vector<double>>(x.values().size());
  const double* xp = x.data();
  for (int bi = 0; bi < B; ++bi) {
    const double* xr = xp + static_cast<size_t>(bi) * K;
    double* orow = out->data() + static_cast<size_t>(bi) * K;
    double m = xr[0];
    for (int k = 1; k < K; ++k) m = std::max(m, xr[k]);
    double s = 0.0;
    for (int k = 0; k < K; ++k) s += std::exp(xr[k] - m);
    double lse = m + std::log(s);
    for (int k = 0; k < K; ++k) orow[k] = xr[k] - lse;
  }
  NodePtr xn = x.node;
  auto ov = out;
  return make_op({B, K}, std::move(out), {x},
                 [xn, ov, B, K](const std::vector<double>& g,
                                BackwardPass& pass) {
                   auto* gx = pass.buffer(xn);
                   if (!gx) return;
                   for (int bi = 0; bi < B; ++bi) {
                     const double* z = ov->data() + static_cast<size_t>(bi) * K;
                     const double* gr = g.data() + static_cast<size_t>(bi) * K;
                     double* gxr = gx->data() + static_cast<size_t>(bi) * K;
                     double gsum = 0.0;
                     for (int k = 0; k < K; ++k) gsum += gr[k];
                     for (int k = 0; k < K; ++k)
                       gxr[k] += gr[k] - std::exp(z[k]) * gsum;
                   }
                 });
}

}  // namespace mat::gradcore
