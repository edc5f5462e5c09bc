#pragma once

#include <cstddef>
#include <span>

#include "rtal/tensor.hpp"

namespace rtal {

// Differentiable primitives. Every operation records itself on the thread's
// tape when an input requires a gradient. Binary operations require equal
// dtypes. Broadcasting is limited to leading batch dimensions: the second
// operand's shape must be a suffix of the first operand's shape.

/// a: [..., m, k]; b: [k, n] (shared across the batch) or [..., k, n] with the
/// same leading dims as `a`. Result: [..., m, n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// Multiplies by a single-element tensor, differentiable in both.
Tensor scale_by(const Tensor& a, const Tensor& s);
Tensor relu(const Tensor& a);
Tensor concat_last_dim(const Tensor& a, const Tensor& b);
/// Rows of `table` ([vocab, d]) selected by `ids`; result shape ids_shape + [d].
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids, const Shape& ids_shape);
Tensor permute(const Tensor& a, std::span<const std::size_t> order);
Tensor transpose_last_two(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
/// Elements [begin, end) along `axis`.
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
/// Sum of all elements as a rank-0 tensor.
Tensor sum(const Tensor& a);

/// Softmax over the last dimension. Masked positions are exactly zero. A row
/// with no visible position is rejected as a malformed mask.
Tensor softmax_last_dim(const Tensor& x, const Mask* mask = nullptr);
Tensor log_softmax_last_dim(const Tensor& x);

/// gamma * (x - mean) / sqrt(var + eps) + beta_shift over the last dimension.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta_shift, double eps = 1e-6);

}  // namespace rtal
