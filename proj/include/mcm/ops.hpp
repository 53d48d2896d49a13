#pragma once

#include <cstddef>

#include "mcm/tensor.hpp"

MCM_BEGIN_NAMESPACE

// Differentiable primitives. Elementwise binaries and matmul broadcast only
// over leading batch extents: the smaller operand's shape (or batch shape)
// must be a suffix of the larger one's.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Scalar factor);
Tensor square(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Mean over the last extent; drops it.
Tensor mean_lastdim(const Tensor& a);

// a: [..., m, k], b: [..., k, n] -> [..., m, n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Scalar eps);
// Exact x * Phi(x).
Tensor gelu(const Tensor& x);

// Row selection on the second-to-last extent, same indices for every batch
// item: x [..., n, e] -> [..., k, e]. Backward scatters additively.
Tensor gather_rows(const Tensor& x, const IndexList& index);
// Adjoint of gather_rows: x [..., k, e] -> [..., rows, e], rows summed into.
Tensor scatter_rows(const Tensor& x, const IndexList& index, std::size_t rows);
// [..., n1, e] ++ [..., n2, e] -> [..., n1 + n2, e]
Tensor concat_rows(const Tensor& a, const Tensor& b);
// [s...] -> [count, s...], gradient summed over the new axis.
Tensor expand_leading(const Tensor& x, std::size_t count);
// [b, L, h*d] -> [b, h, L, d]
Tensor split_heads(const Tensor& x, std::size_t heads);
// [b, h, L, d] -> [b, L, h*d]
Tensor merge_heads(const Tensor& x);
// x [b, M, E] with row `row` of every sample replaced by values [b, E].
Tensor replace_row(const Tensor& x, std::size_t row, const Tensor& values);
// x [b, M, E] -> [b, E]
Tensor select_row(const Tensor& x, std::size_t row);

MCM_END_NAMESPACE
