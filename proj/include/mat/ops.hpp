#pragma once
// Differentiable tensor operations. Shapes follow the row-major layouts
// [B], [B,D], [B,C,L]; every op validates the shapes it needs and throws
// std::invalid_argument on mismatch.
//
// Determinism: per-sample work may be split across MAT_THREADS workers, but
// every reduction that crosses samples (weight gradients, batch statistics)
// runs serially in a fixed order, so results are bitwise identical for any
// worker count.

#include "mat/tensor.hpp"

namespace mat::gradcore {

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);
Tensor exp_(const Tensor& a);
Tensor log_(const Tensor& a);     // caller guarantees positive inputs
Tensor softplus(const Tensor& a);  // log(1 + e^x), overflow-safe
Tensor relu(const Tensor& a);

// ---- reductions / indexing ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor select(const Tensor& a, int flat_index);  // scalar pick
Tensor slice_rows(const Tensor& a, int row_begin, int row_end);
Tensor concat_rows(const Tensor& a, const Tensor& b);
// Zero-copy view with a new shape of equal element count.
Tensor reshape(const Tensor& a, std::vector<int> shape);
// a:[B,Da] b:[B,Db] -> [B,Da+Db]
Tensor concat_cols(const Tensor& a, const Tensor& b);
// x:[B,C,L] -> [B,c1-c0,L]
Tensor slice_channels(const Tensor& x, int c0, int c1);

// ---- linear algebra ----
// x:[B,Din] w:[Dout,Din] b:[Dout] -> [B,Dout]
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);
// a:[M,D] b:[N,D] -> [M,N] = a b^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// rows scaled to unit L2 norm; throws if any row norm < 1e-12
Tensor row_normalize(const Tensor& a);

// ---- neural net ----
// x:[B,Cin,L] w:[Cout,Cin,K] b:[Cout] -> [B,Cout,Lout],
// Lout = (L + 2*padding - K)/stride + 1
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int padding);
// Window max along L; tail padded with -inf, ties resolve to the earliest
// index. x:[B,C,L] -> [B,C,ceil(L/window)]
Tensor maxpool1d(const Tensor& x, int window);

struct BatchNormOpts {
  bool training = true;
  bool update_running = true;  // fold batch stats into running stats
  double momentum = 0.1;
  double eps = 1e-5;
};
// Per-channel normalization of [B,C,L] or [B,C] inputs. Training mode
// normalizes with biased batch statistics and (optionally) updates the
// running buffers with the unbiased variance; eval mode uses the running
// buffers. Training with batch size 1 throws. running_* are plain buffers:
// mutated in place, never part of the graph.
Tensor batchnorm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   Tensor running_mean, Tensor running_var,
                   const BatchNormOpts& opts);

// Row softmax over [B,K]; the max-shift keeps exponents bounded.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

}  // namespace mat::gradcore
