#pragma once

#include <vector>

#include "kddetr/tensor.hpp"

// Differentiable operations on ag::Tensor. Every function records its
// backward rule on the tape when grad mode is on.
//
// Broadcasting is restricted to trailing-axis expansion: in binary
// elementwise ops the smaller operand's shape must equal a suffix of the
// larger one (e.g. [B,T,D] + [D], [B,T,D] + [T,D]).
namespace kddetr::ag {

// a: [..., k], b: [k, n] -> [..., n]. Leading axes of `a` are flattened.
Tensor matmul(const Tensor& a, const Tensor& b);

// Batched product. a: [G, m, k]; b: [G, k, n], or [G, n, k] with
// transpose_b.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
// Throws DomainError on any non-positive entry.
Tensor log(const Tensor& x);
// Subgradient 0 at the kink.
Tensor abs(const Tensor& x);

// Full reductions to shape [1].
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Reduces the last axis: [..., n] -> [...] ([1] for rank-1 input).
Tensor sum_last(const Tensor& x);

// Last-axis softmax of x / temperature, max-subtracted.
Tensor softmax(const Tensor& x, double temperature = 1.0);
Tensor log_softmax(const Tensor& x, double temperature = 1.0);

inline constexpr double kLayerNormEps = 1e-5;
// Normalizes the last axis; gamma and beta have shape [n].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);

Tensor reshape(const Tensor& x, Shape shape);
// [a, b, c, d] -> [a, c, b, d].
Tensor swap_axes12(const Tensor& x);
// x: [...] -> [count, ...]; backward sums over the new axis.
Tensor expand_leading(const Tensor& x, int count);

// Views x as rows of its last axis and selects `rows` (repeats allowed):
// -> [rows.size(), last].
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);
// x: [P, C] -> [P], element (p, index[p]).
Tensor pick(const Tensor& x, const std::vector<int>& index);

}  // namespace kddetr::ag
