#pragma once

#include <vector>

#include "rainforge/tensor.hpp"

// Differentiable tensor operations. Every op returns a fresh tensor and, when
// an input requires grad under an active Tape, records its backward rule.
//
// Binary elementwise ops broadcast size-1 extents (and missing leading axes)
// against the other operand.

namespace rainforge {

Shape broadcast_shape(const Shape& a, const Shape& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// Exact (erf) GELU.
Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
/// Natural log; non-positive input is an error.
Tensor log(const Tensor& x);
/// |x| with derivative sign(x), 0 at x == 0.
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);

Tensor zeros_like(const Tensor& x);

/// Sum of every element, shape [1].
Tensor sum(const Tensor& x);
/// Mean of every element, shape [1].
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, const std::vector<int64_t>& axes, bool keepdim);
Tensor mean(const Tensor& x, const std::vector<int64_t>& axes, bool keepdim);
/// Maximum along one axis; gradient goes to the first maximal element.
Tensor max(const Tensor& x, int64_t axis, bool keepdim);
/// Reduces a broadcast result back to `shape` by summing expanded axes.
Tensor sum_to(const Tensor& x, const Shape& shape);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int64_t>& perm);
Tensor transpose(const Tensor& x, int64_t a, int64_t b);
Tensor concat(const std::vector<Tensor>& xs, int64_t axis);
/// Half-open range [start, end) along `axis`.
Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t end);
/// Cyclic shift: out[i] = x[(i - shift) mod n] along `axis`.
Tensor roll(const Tensor& x, int64_t axis, int64_t shift);

/// Batched product over the last two axes. Leading batch axes must be equal,
/// or one operand may be a plain matrix shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Solves A X = B for symmetric positive definite A [.., k, k] via Cholesky.
Tensor solve_spd(const Tensor& a, const Tensor& b);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int64_t axis);

}  // namespace rainforge
