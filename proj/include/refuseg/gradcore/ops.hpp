#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "refuseg/gradcore/tape.hpp"

// Differentiable primitives. Every op is instantiated for float (training) and
// double (finite-difference recomputation). Reductions accumulate in double.
namespace refuseg::grad {

// --- Network layers ---------------------------------------------------------

// Cross-correlation of x[B,Cin,H,W] with weight[Cout,Cin,kh,kw] plus bias[Cout].
template <class T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, int stride, int padding);

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.1;
  double eps = 1e-5;
};

// Normalizes x[B,C] or x[B,C,H,W] per channel. In training mode the batch
// statistics are used and the running buffers are updated in place.
template <class T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> shift, BasicTensor<T>& running_mean,
                 BasicTensor<T>& running_var, const BatchNormOptions& options);

// x[B,Din] * weight[Dout,Din]^T + bias[Dout].
template <class T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias);

// NaN passes through unchanged.
template <class T>
Var<T> relu(Var<T> x);

// 2x2 window, stride 2; ties route to the first element in row-major order, NaN wins.
template <class T>
Var<T> maxpool2d(Var<T> x);

template <class T>
Var<T> upsample_nearest2x(Var<T> x);

template <class T>
Var<T> concat_channels(std::span<const Var<T>> inputs);

// Concatenates 2D inputs along the row axis.
template <class T>
Var<T> concat_rows(std::span<const Var<T>> inputs);

// Per-position maximum over K same-shape inputs; the gradient goes to the
// argmax, ties to the lowest input index. NaN wins, so it propagates.
template <class T>
Var<T> elemwise_max_n(std::span<const Var<T>> inputs);

// [B,C,H,W] -> [B,C]
template <class T>
Var<T> global_avgpool(Var<T> x);

// Softmax over the channel axis of [B,C,H,W].
template <class T>
Var<T> softmax_channels(Var<T> x);

// --- Elementwise ------------------------------------------------------------

template <class T>
Var<T> add(Var<T> a, Var<T> b);
template <class T>
Var<T> sub(Var<T> a, Var<T> b);
template <class T>
Var<T> mul(Var<T> a, Var<T> b);
template <class T>
Var<T> div(Var<T> a, Var<T> b);
template <class T>
Var<T> scale(Var<T> x, double factor);
template <class T>
Var<T> add_scalar(Var<T> x, double offset);
template <class T>
Var<T> log(Var<T> x);
template <class T>
Var<T> exp(Var<T> x);
template <class T>
Var<T> pow_scalar(Var<T> x, double exponent);
// Gradient passes only where lo < x < hi.
template <class T>
Var<T> clamp(Var<T> x, double lo, double hi);

// --- Reductions and indexing -------------------------------------------------

template <class T>
Var<T> sum(Var<T> x);
template <class T>
Var<T> mean(Var<T> x);
// [B,C,...] -> [C]
template <class T>
Var<T> sum_per_channel(Var<T> x);
// [M,N] -> [M]
template <class T>
Var<T> sum_rows(Var<T> x);
// Gathers flat (row-major) positions into a 1-D result.
template <class T>
Var<T> pick(Var<T> x, std::vector<int64_t> flat_indices);
// Rows of x[M,K] scaled to unit Euclidean norm; zero rows are rejected.
template <class T>
Var<T> l2_normalize_rows(Var<T> x);
// a[M,K] * b[N,K]^T -> [M,N]
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b);

}  // namespace refuseg::grad
