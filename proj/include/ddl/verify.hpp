#pragma once

#include "ddl/config.hpp"
#include "ddl/delta_op.hpp"

#include "json.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace ddl::verify {

inline constexpr double kAlgebraicTol = 1e-12;
inline constexpr double kSpectralTol = 1e-10;
inline constexpr double kEigenTol = 1e-9;
inline constexpr double kGradientTol = 1e-5;

struct CheckReport {
  std::string check;
  std::uint64_t seed = 0;
  nlohmann::json params;
  double max_dev = 0;
  bool pass = false;

  /// {check, seed, params, max_dev, pass} on one line.
  std::string json_line() const;
};

using DeltaUpdateFn = std::function<StateMatrix<double>(const StateMatrix<double>&, const UnitDirection<double>&,
                                                        double, const Vector<double>&)>;

struct Options {
  bool fast = false;
  std::uint64_t seed = 0;
  /// Kernel under test for the update-law checks.
  DeltaUpdateFn delta_update = [](const StateMatrix<double>& x, const UnitDirection<double>& k, double beta,
                                  const Vector<double>& v) { return ddl::delta_update(x, k, beta, v); };
};

/// Eigen-action, determinant, involution, idempotence, singular values,
/// eigenvalue multiset and orthogonality, one report per (property, d, beta)
/// carrying the worst seed.
std::vector<CheckReport> check_spectrum_suite(const std::vector<std::uint64_t>& seeds, const std::vector<Index>& dims,
                                              const std::vector<double>& betas);

/// Fused application against the dense product on random shapes.
std::vector<CheckReport> check_fused_dense(std::uint64_t seed, int instances, Index max_d = 64, Index max_dv = 8);

/// k^T X' = (1 - beta) k^T X + beta v^T on random instances, plus exact
/// overwrite at beta = 1.
std::vector<CheckReport> check_projected_dynamics(std::uint64_t seed, int trials, const DeltaUpdateFn& kernel);

/// Depth iteration of the update against the time recurrence
/// S_t = (I - b k k^T) S + b k v^T and its transpose M_t = M + b (v - M k) k^T.
std::vector<CheckReport> check_deltanet_isomorphism(std::uint64_t seed, int rollouts, int steps,
                                                    const DeltaUpdateFn& kernel);

/// s_i delta_ij - beta s_j k_i k_j against fused application to diag(s).
std::vector<CheckReport> check_diagonal_mixing(std::uint64_t seed, int trials);

struct GradientCase {
  Index d_v = 1;
  Variant variant = Variant::baseline;
  MapMode map_mode = MapMode::kmap;
};

/// Central differences on a 2-layer DDL model (d = 8, T = 4) in double,
/// relative error per parameter tensor. `max_coords` > 0 samples that many
/// entries per tensor.
std::vector<CheckReport> check_gradients(std::uint64_t seed, const std::vector<GradientCase>& cases, int max_coords = 0);

/// Gradients with the gate pushed to logit +-10, and through a direction
/// branch producing |k~| near eps_k.
std::vector<CheckReport> check_gradient_edge_cases(std::uint64_t seed);

/// The default case list: d_v in {1, 4} for every variant and map mode.
std::vector<GradientCase> default_gradient_cases();

/// Every check; `options.fast` reduces seeds and sample counts.
std::vector<CheckReport> run_all(const Options& options);

}  // namespace ddl::verify
