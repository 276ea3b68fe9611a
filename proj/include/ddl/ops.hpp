#pragma once

#include "ddl/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace ddl {

// Elementwise binary ops broadcast with the usual trailing-axis rules.
template <typename Scalar> Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar> Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
/// Elementwise maximum; ties send the gradient to `a`.
template <typename Scalar> Tensor<Scalar> maximum(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// a * scale + shift.
template <typename Scalar> Tensor<Scalar> affine(const Tensor<Scalar>& a, Scalar scale, Scalar shift);

template <typename Scalar> Tensor<Scalar> neg(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> square(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> sqrt(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> rsqrt(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> exp(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> log(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> tanh(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> sigmoid(const Tensor<Scalar>& a);
/// x * sigmoid(x)
template <typename Scalar> Tensor<Scalar> silu(const Tensor<Scalar>& a);

/// Matrix product over the last two axes.
///
/// A rank-2 `b` is shared by every leading index of `a`; otherwise the leading
/// (batch) axes of both operands must be identical.
template <typename Scalar> Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// Swaps two axes (defaults to the last two).
template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a, Index axis0 = -2, Index axis1 = -1);
/// One extent may be -1 and is inferred.
template <typename Scalar> Tensor<Scalar> reshape(const Tensor<Scalar>& a, Shape shape);
template <typename Scalar> Tensor<Scalar> unsqueeze(const Tensor<Scalar>& a, Index axis);
/// Half-open range [start, stop) along `axis`.
template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& a, Index axis, Index start, Index stop);
template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, Index axis);
template <typename Scalar> Tensor<Scalar> broadcast_to(const Tensor<Scalar>& a, const Shape& shape);

template <typename Scalar> Tensor<Scalar> sum(const Tensor<Scalar>& a, Index axis, bool keepdim = false);
template <typename Scalar> Tensor<Scalar> mean(const Tensor<Scalar>& a, Index axis, bool keepdim = false);
/// Sum of every element, scalar-shaped.
template <typename Scalar> Tensor<Scalar> sum(const Tensor<Scalar>& a);
template <typename Scalar> Tensor<Scalar> mean(const Tensor<Scalar>& a);

template <typename Scalar> Tensor<Scalar> softmax(const Tensor<Scalar>& a, Index axis = -1);

/// Precision change; the gradient is cast back.
template <typename To, typename From> Tensor<To> cast(const Tensor<From>& a);

/// Rows of `table` (V, d) selected by `indices`; result shape is
/// index_shape + (d).
template <typename Scalar>
Tensor<Scalar> embedding(const Tensor<Scalar>& table, std::span<const std::int32_t> indices,
                         const Shape& index_shape);

/// Mean token cross-entropy of logits (..., V) against integer targets.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const std::int32_t> targets);

/// x * rsqrt(mean(x^2 over the last axis) + eps) * scale as a single op.
/// `scale` may be empty (no affine).
template <typename Scalar>
Tensor<Scalar> rms_norm(const Tensor<Scalar>& x, const Tensor<Scalar>* scale, Scalar eps);

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return mul(a, b); }
template <typename Scalar>
Tensor<Scalar> operator/(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return div(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a) { return neg(a); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, Scalar s) { return affine(a, s, Scalar(0)); }
template <typename Scalar>
Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& a) { return affine(a, s, Scalar(0)); }
template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, Scalar s) { return affine(a, Scalar(1), s); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, Scalar s) { return affine(a, Scalar(1), -s); }

}  // namespace ddl
