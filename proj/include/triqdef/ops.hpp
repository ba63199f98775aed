#pragma once

// Differentiable operator set. Image tensors are NCHW.

#include <cstddef>
#include <vector>

#include "triqdef/autograd.hpp"

namespace triqdef::ad {

// Elementwise, numpy-style broadcasting (shapes aligned from the right).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);

Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);
Var sigmoid(const Var& a);
/// Derivative at exactly 0 is 0.
Var relu(const Var& a);
/// Gradient passes where lo <= a <= hi.
Var clip(const Var& a, double lo, double hi);
/// Elementwise atan2(y, x) in (-pi, pi]. Derivative at the origin is 0.
Var atan2(const Var& y, const Var& x);
/// Maps a into [-period/2, period/2) by subtracting multiples of period.
/// Derivative 1 everywhere.
Var wrap_periodic(const Var& a, double period);

Var sum(const Var& a);
Var mean(const Var& a);
/// Reduce a to `shape` by summing broadcast axes (adjoint of expand).
Var sum_to(const Var& a, const Shape& shape);
/// Broadcast a to `shape`.
Var expand(const Var& a, const Shape& shape);

Var reshape(const Var& a, Shape shape);
Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t length);
Var concat(const std::vector<Var>& parts, std::size_t axis);
/// 2-d transpose.
Var transpose(const Var& a);
/// [n,k] x [k,m] -> [n,m]
Var matmul(const Var& a, const Var& b);

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t padding = 0;   // zero padding on every side
};

/// x [N,C,H,W], w [O,C,KH,KW] -> [N,O,Ho,Wo]
Var conv2d(const Var& x, const Var& w, Conv2dOptions opt = {});
/// Non-overlapping k x k max pooling (stride k, floor). Ties pick the first.
Var max_pool2d(const Var& x, std::size_t k);
/// Non-overlapping k x k sum pooling; H and W must be multiples of k.
Var sum_pool2d(const Var& x, std::size_t k);
/// Edge-replicate padding by p on each spatial side.
Var pad_replicate(const Var& x, std::size_t p);

/// Row softmax of [N,K].
Var softmax(const Var& logits);
/// Per-row cross-entropy -sum_k t_k log softmax(z)_k of [N,K] logits with
/// constant target distributions; returns [N]. Uses log-sum-exp.
Var softmax_cross_entropy(const Var& logits, const Tensor& targets);

Tensor one_hot(const std::vector<int>& labels, std::size_t classes);

/// Adds patch [C,h,w] into a [N,C,H,W] canvas at rows[n], cols[n] after
/// zeroing that window in `x`. Differentiable in both x and patch.
Var paste_patch(const Var& x, const Var& patch, const std::vector<std::size_t>& rows,
                const std::vector<std::size_t>& cols);

namespace detail {

// Adjoint kernels used by backward rules; exposed for gradient checks.
Var conv2d_input_grad(const Var& grad_out, const Var& w, const Shape& input_shape, Conv2dOptions opt);
Var conv2d_weight_grad(const Var& x, const Var& grad_out, const Shape& weight_shape, Conv2dOptions opt);
Var gather(const Var& a, std::vector<std::size_t> index, Shape out_shape);
Var scatter_add(const Var& a, std::vector<std::size_t> index, Shape out_shape);
Var upsample_nearest(const Var& a, std::size_t k);
Var pad_replicate_adjoint(const Var& g, std::size_t p, const Shape& input_shape);
Var pad_slice(const Var& a, std::size_t axis, std::size_t start, std::size_t full_length);
Var crop_patch_sum(const Var& g, const Shape& patch_shape, const std::vector<std::size_t>& rows,
                   const std::vector<std::size_t>& cols);

} // namespace detail

} // namespace triqdef::ad
