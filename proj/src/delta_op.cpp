#include "ddl/delta_op.hpp"

#include "ddl/ops.hpp"

#include <algorithm>
#include <cmath>

namespace ddl {

namespace {

template <typename Scalar>
void require_dim(const char* op, Index expected, Index got) {
  if (expected != got)
    throw ShapeError(std::string(op) + ": direction has length " + std::to_string(expected) +
                     " but state has " + std::to_string(got) + " rows");
}

}  // namespace

template <typename Scalar>
UnitDirection<Scalar> normalize_direction(const Vector<Scalar>& k_tilde, Scalar eps_k) {
  const Index d = k_tilde.size();
  if (d < 1) throw ShapeError("normalize_direction: empty direction");
  if (eps_k < 0) throw std::invalid_argument("normalize_direction: eps_k must be non-negative");
  if (eps_k == 0 && k_tilde.isZero(0))
    throw ZeroDirectionError("normalize_direction: zero direction with eps_k = 0");
  const Scalar dd = static_cast<Scalar>(d);
  const Scalar mean_square = k_tilde.squaredNorm() / dd;
  const Scalar inv_rms = Scalar(1) / std::sqrt(mean_square + eps_k * eps_k / dd);
  const Scalar k_scale = Scalar(1) / std::sqrt(dd);
  return UnitDirection<Scalar>((k_tilde * inv_rms) * k_scale, eps_k);
}

template <typename Scalar>
Vector<Scalar> normalize_direction_direct(const Vector<Scalar>& k_tilde, Scalar eps_k) {
  return k_tilde / std::sqrt(k_tilde.squaredNorm() + eps_k * eps_k);
}

template <typename Scalar>
StateMatrix<Scalar> apply_operator(const DeltaOperatorView<Scalar>& op, const StateMatrix<Scalar>& x) {
  const auto& k = op.k.vector();
  require_dim<Scalar>("apply_operator", k.size(), x.rows());
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> r = k.transpose() * x;
  return x - op.beta * (k * r);
}

template <typename Scalar>
Matrix<Scalar> dense_materialize(const DeltaOperatorView<Scalar>& op) {
  const Index d = op.dim();
  if (d > kDenseOracleLimit)
    throw OversizeError("dense_materialize: d = " + std::to_string(d) + " exceeds " +
                        std::to_string(kDenseOracleLimit));
  const auto& k = op.k.vector();
  return Matrix<Scalar>::Identity(d, d) - op.beta * (k * k.transpose());
}

template <typename Scalar>
std::vector<Scalar> Spectrum<Scalar>::eigenvalues() const {
  std::vector<Scalar> values(static_cast<std::size_t>(unit_multiplicity), unit_eigenvalue);
  values.push_back(direction_eigenvalue);
  std::sort(values.begin(), values.end());
  return values;
}

template <typename Scalar>
Spectrum<Scalar> spectrum(const DeltaOperatorView<Scalar>& op) {
  return {Scalar(1), op.dim() - 1, Scalar(1) - op.beta, op.k.vector()};
}

template <typename Scalar>
Matrix<Scalar> complement_basis(const Vector<Scalar>& k) {
  const Index d = k.size();
  Index skip = 0;
  k.cwiseAbs().maxCoeff(&skip);
  Matrix<Scalar> basis(d, d - 1);
  Index col = 0;
  for (Index i = 0; i < d; ++i) {
    if (i == skip) continue;
    Vector<Scalar> u = Vector<Scalar>::Unit(d, i);
    // Two passes of modified Gram-Schmidt keep the basis orthogonal to k at
    // round-off level.
    for (int pass = 0; pass < 2; ++pass) {
      u -= k.dot(u) * k;
      for (Index j = 0; j < col; ++j) u -= basis.col(j).dot(u) * basis.col(j);
    }
    basis.col(col++) = u.normalized();
  }
  return basis;
}

template <typename Scalar>
SpectrumResiduals<Scalar> spectrum_residuals(const DeltaOperatorView<Scalar>& op) {
  const auto& k = op.k.vector();
  const StateMatrix<Scalar> ak = apply_operator(op, StateMatrix<Scalar>(k));
  const Scalar direction = (ak.col(0) - (Scalar(1) - op.beta) * k).cwiseAbs().maxCoeff();
  Scalar complement = 0;
  if (op.dim() > 1) {
    const Matrix<Scalar> u = complement_basis(k);
    complement = (apply_operator(op, u) - u).cwiseAbs().maxCoeff();
  }
  return {direction, complement};
}

template <typename Scalar>
Vector<Scalar> singular_values(const DeltaOperatorView<Scalar>& op) {
  Vector<Scalar> s = Vector<Scalar>::Ones(op.dim());
  s[op.dim() - 1] = std::abs(Scalar(1) - op.beta);
  std::sort(s.data(), s.data() + s.size(), std::greater<Scalar>());
  return s;
}

template <typename Scalar>
Determinant<Scalar> determinant(const DeltaOperatorView<Scalar>& op, Index d_v) {
  if (d_v < 1) throw std::invalid_argument("determinant: d_v must be at least 1");
  const Scalar spatial = Scalar(1) - op.beta;
  Scalar lifted = 1;
  for (Index i = 0; i < d_v; ++i) lifted *= spatial;
  return {spatial, lifted};
}

template <typename Scalar>
StateMatrix<Scalar> delta_update(const StateMatrix<Scalar>& x, const UnitDirection<Scalar>& k,
                                 Scalar beta, const Vector<Scalar>& v) {
  const auto& kv = k.vector();
  require_dim<Scalar>("delta_update", kv.size(), x.rows());
  if (v.size() != x.cols())
    throw ShapeError("delta_update: value has length " + std::to_string(v.size()) + " but state has " +
                     std::to_string(x.cols()) + " columns");
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> correction = v.transpose() - kv.transpose() * x;
  return x + beta * (kv * correction);
}

template <typename Scalar>
Matrix<Scalar> diagonal_case(const Vector<Scalar>& s, const UnitDirection<Scalar>& k, Scalar beta) {
  const auto& kv = k.vector();
  require_dim<Scalar>("diagonal_case", kv.size(), s.size());
  const Index d = s.size();
  Matrix<Scalar> out(d, d);
  for (Index j = 0; j < d; ++j)
    for (Index i = 0; i < d; ++i)
      out(i, j) = (i == j ? s[i] : Scalar(0)) - beta * s[j] * kv[i] * kv[j];
  return out;
}

Regime regime(double beta) {
  constexpr double tol = 1e-12;
  if (std::abs(beta) <= tol) return Regime::identity;
  if (std::abs(beta - 1) <= tol) return Regime::projection;
  if (beta < 1) return Regime::contraction;
  return Regime::reflection_like;
}

std::string to_string(Regime r) {
  switch (r) {
    case Regime::identity: return "identity";
    case Regime::contraction: return "contraction";
    case Regime::projection: return "projection";
    case Regime::reflection_like: return "reflection-like";
  }
  return "unknown";
}

// Tape ops

template <typename Scalar>
Tensor<Scalar> normalize_direction(const Tensor<Scalar>& k_tilde, Scalar eps_k) {
  const Index d = k_tilde.dim(-1);
  if (eps_k == 0) {
    const Index rows = k_tilde.size() / d;
    for (Index r = 0; r < rows; ++r)
      if (k_tilde.data().segment(r * d, d).isZero(0))
        throw ZeroDirectionError("normalize_direction: zero direction with eps_k = 0");
  }
  const Scalar dd = static_cast<Scalar>(d);
  Tensor<Scalar> k_hat = rms_norm(k_tilde, static_cast<const Tensor<Scalar>*>(nullptr), eps_k * eps_k / dd);
  return k_hat * (Scalar(1) / std::sqrt(dd));
}

template <typename Scalar>
Tensor<Scalar> delta_update(const Tensor<Scalar>& x, const Tensor<Scalar>& k, const Tensor<Scalar>& beta,
                            const Tensor<Scalar>& v) {
  if (x.ndim() < 2) throw ShapeError("delta_update: state must have rank >= 2, got " + to_string(x.shape()));
  const Index d = x.dim(-2), dv = x.dim(-1);
  const Index n = x.size() / (d * dv);
  auto mismatch = [&](const char* what, const Tensor<Scalar>& t) {
    return ShapeError(std::string("delta_update: ") + what + " shape " + to_string(t.shape()) +
                      " does not match state " + to_string(x.shape()));
  };
  if (k.dim(-1) != d || k.size() != n * d) throw mismatch("direction", k);
  if (beta.size() != n) throw mismatch("gate", beta);
  if (v.dim(-1) != dv || v.size() != n * dv) throw mismatch("value", v);
  if (finite_checks_enabled())
    for (const auto* t : {&x, &k, &beta, &v})
      if (!t->data().allFinite()) throw NonFiniteError("delta_update: non-finite input");

  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMap = Eigen::Map<const RowMatrix>;
  using Map = Eigen::Map<RowMatrix>;
  using ConstVec = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;
  using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

  Tensor<Scalar> out(x.shape());
  for (Index i = 0; i < n; ++i) {
    ConstMap xi(x.data().data() + i * d * dv, d, dv);
    ConstVec ki(k.data().data() + i * d, d);
    ConstVec vi(v.data().data() + i * dv, dv);
    const RowVec correction = vi.transpose() - ki.transpose() * xi;
    Map(out.mutable_data().data() + i * d * dv, d, dv) = xi + beta.data()[i] * (ki * correction);
  }

  Tape* tape = Tape::active();
  if (tape && (x.requires_grad() || k.requires_grad() || beta.requires_grad() || v.requires_grad())) {
    tape->record({x.node(), k.node(), beta.node(), v.node()}, out.node(),
                 [xn = x.node(), kn = k.node(), bn = beta.node(), vn = v.node(), on = out.node(), n, d, dv] {
                   Scalar* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
                   Scalar* gk = kn->requires_grad ? kn->ensure_grad().data() : nullptr;
                   Scalar* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
                   Scalar* gv = vn->requires_grad ? vn->ensure_grad().data() : nullptr;
                   for (Index i = 0; i < n; ++i) {
                     ConstMap xi(xn->data.data() + i * d * dv, d, dv);
                     ConstMap gi(on->grad.data() + i * d * dv, d, dv);
                     ConstVec ki(kn->data.data() + i * d, d);
                     ConstVec vi(vn->data.data() + i * dv, dv);
                     const Scalar b = bn->data[i];
                     // e = v - X^T k, q = G^T k
                     const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> e = vi - xi.transpose() * ki;
                     const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> q = gi.transpose() * ki;
                     if (gx) Map(gx + i * d * dv, d, dv) += gi - b * (ki * q.transpose());
                     if (gk)
                       Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(gk + i * d, d) +=
                           b * (gi * e - xi * q);
                     if (gb) gb[i] += q.dot(e);
                     if (gv) Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(gv + i * dv, dv) += b * q;
                   }
                 });
  }
  return out;
}

#define DDL_INSTANTIATE_DELTA_OP(S)                                                                   \
  template UnitDirection<S> normalize_direction(const Vector<S>&, S);                                 \
  template Vector<S> normalize_direction_direct(const Vector<S>&, S);                                 \
  template StateMatrix<S> apply_operator(const DeltaOperatorView<S>&, const StateMatrix<S>&);         \
  template Matrix<S> dense_materialize(const DeltaOperatorView<S>&);                                  \
  template struct Spectrum<S>;                                                                        \
  template Spectrum<S> spectrum(const DeltaOperatorView<S>&);                                         \
  template Matrix<S> complement_basis(const Vector<S>&);                                              \
  template SpectrumResiduals<S> spectrum_residuals(const DeltaOperatorView<S>&);                      \
  template Vector<S> singular_values(const DeltaOperatorView<S>&);                                    \
  template Determinant<S> determinant(const DeltaOperatorView<S>&, Index);                            \
  template StateMatrix<S> delta_update(const StateMatrix<S>&, const UnitDirection<S>&, S, const Vector<S>&); \
  template Matrix<S> diagonal_case(const Vector<S>&, const UnitDirection<S>&, S);                     \
  template Tensor<S> normalize_direction(const Tensor<S>&, S);                                        \
  template Tensor<S> delta_update(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);

DDL_INSTANTIATE_DELTA_OP(float)
DDL_INSTANTIATE_DELTA_OP(double)
#undef DDL_INSTANTIATE_DELTA_OP

}  // namespace ddl
