#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "mem4d/tensor.hpp"

// Differentiable primitives. Every function returns a fresh tensor and, when
// a tape is active and any input requires grad, records its local derivative.

namespace mem4d {

// -- elementwise, numpy-style trailing-dimension broadcasting ---------------
Shape broadcast_shape(const Shape& a, const Shape& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real factor);
Tensor add_scalar(const Tensor& a, Real offset);

Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor tan(const Tensor& a);
Tensor square(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, Real s) { return scale(a, s); }
inline Tensor operator*(Real s, const Tensor& a) { return scale(a, s); }

// -- contractions ----------------------------------------------------------
/// (..., m, k) x (..., k, n) with identical leading dims, or any rank-r `a`
/// against a rank-2 `b` (the leading dims of `a` are treated as rows).
Tensor matmul(const Tensor& a, const Tensor& b);

/// a x b^T over the last two dims; same batching rules as matmul.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

/// All-pairs row dot products of a (n x k) and b (m x k), summed over k in
/// index order. Slower than matmul_nt but reproducible against a plain loop.
Tensor pairwise_dot(const Tensor& a, const Tensor& b);

// -- reductions ------------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Euclidean norm over the last axis; the gradient at a zero row is zero.
Tensor norm_last(const Tensor& a);

// -- normalisation ---------------------------------------------------------
Tensor softmax(const Tensor& x, int axis = -1);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps = Real(1e-5));

// -- layout ----------------------------------------------------------------
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor transpose_last2(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);

using IndexList = std::shared_ptr<const std::vector<std::uint32_t>>;
/// out.flat[i] = a.flat[index[i]]; the backward pass scatter-adds.
Tensor gather(const Tensor& a, IndexList index, Shape out_shape);

// -- spatial ---------------------------------------------------------------
/// Average pooling over the last two dims. Inputs are edge-replicated up to a
/// multiple of `factor`, so output extents are ceil(H/f) x ceil(W/f).
Tensor pool2d(const Tensor& x, std::size_t factor);

// -- rotations -------------------------------------------------------------
/// Rotates consecutive channel pairs of x (..., N, D) by per-token angles:
/// cos/sin tables are N x D/2 constants.
Tensor rotate_pairs(const Tensor& x, std::shared_ptr<const std::vector<Real>> cos_table,
                    std::shared_ptr<const std::vector<Real>> sin_table);

/// Hamilton product over the last axis (w, x, y, z).
Tensor quat_mul(const Tensor& a, const Tensor& b);

}  // namespace mem4d
