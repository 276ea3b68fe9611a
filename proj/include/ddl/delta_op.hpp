#pragma once

#include "ddl/tensor.hpp"

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

namespace ddl {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
/// Hidden state X: d features (rows) by d_v value channels (columns).
template <typename Scalar>
using StateMatrix = Matrix<Scalar>;

class ZeroDirectionError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class OversizeError : public std::length_error {
 public:
  using std::length_error::length_error;
};

/// Largest d for which the dense d x d operator may be formed.
inline constexpr Index kDenseOracleLimit = 1024;

/// Direction k with ||k|| = ||k~|| / sqrt(||k~||^2 + eps^2); exactly unit when
/// eps = 0.
template <typename Scalar>
class UnitDirection {
 public:
  const Vector<Scalar>& vector() const { return k_; }
  Index dim() const { return k_.size(); }
  Scalar eps() const { return eps_; }

 private:
  template <typename S>
  friend UnitDirection<S> normalize_direction(const Vector<S>& k_tilde, S eps_k);

  UnitDirection(Vector<Scalar> k, Scalar eps) : k_(std::move(k)), eps_(eps) {}

  Vector<Scalar> k_;
  Scalar eps_;
};

/// A = I - beta k k^T, held as (k, beta). The d x d matrix is only formed by
/// dense_materialize().
template <typename Scalar>
struct DeltaOperatorView {
  UnitDirection<Scalar> k;
  Scalar beta;

  Index dim() const { return k.dim(); }
};

/// RMS normalization with epsilon eps_k^2/d followed by the constant scale
/// 1/sqrt(d). Throws ZeroDirectionError for k~ = 0 with eps_k = 0.
template <typename Scalar>
UnitDirection<Scalar> normalize_direction(const Vector<Scalar>& k_tilde, Scalar eps_k);

/// Reference form k~ / sqrt(||k~||^2 + eps_k^2).
template <typename Scalar>
Vector<Scalar> normalize_direction_direct(const Vector<Scalar>& k_tilde, Scalar eps_k);

/// X - beta k (k^T X) through the row vector k^T X; no d x d intermediate.
template <typename Scalar>
StateMatrix<Scalar> apply_operator(const DeltaOperatorView<Scalar>& op, const StateMatrix<Scalar>& x);

template <typename Scalar>
Matrix<Scalar> dense_materialize(const DeltaOperatorView<Scalar>& op);

template <typename Scalar>
struct Spectrum {
  Scalar unit_eigenvalue;       // 1
  Index unit_multiplicity;      // d - 1
  Scalar direction_eigenvalue;  // 1 - beta
  Vector<Scalar> direction_eigenvector;

  /// Full multiset, ascending.
  std::vector<Scalar> eigenvalues() const;
};

template <typename Scalar>
Spectrum<Scalar> spectrum(const DeltaOperatorView<Scalar>& op);

/// Max-norm residuals of A k - (1 - beta) k and of A u - u over an
/// orthonormal basis u of the complement of k.
template <typename Scalar>
struct SpectrumResiduals {
  Scalar direction;
  Scalar complement;
};

template <typename Scalar>
SpectrumResiduals<Scalar> spectrum_residuals(const DeltaOperatorView<Scalar>& op);

/// Orthonormal basis of the complement of unit `k` as the columns of a
/// d x (d-1) matrix. Gram-Schmidt over canonical vectors, skipping the one
/// most aligned with k.
template <typename Scalar>
Matrix<Scalar> complement_basis(const Vector<Scalar>& k);

/// Singular values in descending order: 1 (d-1 times) and |1 - beta|, sorted.
template <typename Scalar>
Vector<Scalar> singular_values(const DeltaOperatorView<Scalar>& op);

template <typename Scalar>
struct Determinant {
  Scalar spatial;  // det A = 1 - beta
  Scalar lifted;   // det(I_{d_v} (x) A) = (1 - beta)^{d_v}
};

template <typename Scalar>
Determinant<Scalar> determinant(const DeltaOperatorView<Scalar>& op, Index d_v);

/// X + beta k (v^T - k^T X).
template <typename Scalar>
StateMatrix<Scalar> delta_update(const StateMatrix<Scalar>& x, const UnitDirection<Scalar>& k,
                                 Scalar beta, const Vector<Scalar>& v);

/// A diag(s) entrywise: s_i delta_ij - beta s_j k_i k_j.
template <typename Scalar>
Matrix<Scalar> diagonal_case(const Vector<Scalar>& s, const UnitDirection<Scalar>& k, Scalar beta);

enum class Regime { identity, contraction, projection, reflection_like };

/// beta = 0 identity, (0,1) contraction, 1 projection, (1,2] reflection-like.
Regime regime(double beta);
std::string to_string(Regime r);

// Tape-aware versions used by the model.

/// Batched precision-friendly normalization along the last axis.
template <typename Scalar>
Tensor<Scalar> normalize_direction(const Tensor<Scalar>& k_tilde, Scalar eps_k);

/// Batched fused update X + beta k (v^T - k^T X) with
/// X (..., d, d_v), k (..., d), beta (..., 1), v (..., d_v).
template <typename Scalar>
Tensor<Scalar> delta_update(const Tensor<Scalar>& x, const Tensor<Scalar>& k,
                            const Tensor<Scalar>& beta, const Tensor<Scalar>& v);

}  // namespace ddl
