#pragma once

#include "ddl/config.hpp"
#include "ddl/init.hpp"
#include "ddl/tensor.hpp"

#include <functional>
#include <optional>
#include <random>
#include <string>

namespace ddl {

/// A map R^d -> R^d applied over the last axis of a batched tensor.
template <typename Scalar>
using Sublayer = std::function<Tensor<Scalar>(const Tensor<Scalar>&)>;

/// logit(beta_init / 2), with beta_init / 2 clamped to [1e-8, 1 - 1e-8].
double gate_bias_for(double beta_init);

/// Scalar gate beta = 2 sigmoid(logit) in (0, 2).
///
/// single-linear: logit = c^T w + b
/// two-layer:     logit = tanh(c^T W1 + b1) w2 + b
///
/// The weight feeding the logit (w, or w2) starts at zero so that beta equals
/// beta_init for every input at initialization.
template <typename Scalar>
struct BetaGate {
  GateMode mode = GateMode::single_linear;
  double beta_init = 1.0;
  Tensor<Scalar> weight;       // (d, 1) or (d, hidden)
  Tensor<Scalar> hidden_bias;  // (hidden), two-layer only
  Tensor<Scalar> out_weight;   // (hidden, 1), two-layer only
  Tensor<Scalar> bias;         // (1)

  static BetaGate init(Index d, GateMode mode, Index hidden, double beta_init, std::mt19937_64& rng);
  void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

/// Logit of the gate for contexts (..., d), evaluated in double; shape (..., 1).
template <typename Scalar>
Tensor<double> gate_logit(const Tensor<Scalar>& context, const BetaGate<Scalar>& gate);

/// 2 sigmoid(logit), computed in double and returned at model precision.
template <typename Scalar>
Tensor<Scalar> gate_beta(const Tensor<Scalar>& context, const BetaGate<Scalar>& gate);

template <typename Scalar>
struct BlockOptions {
  double eps_k = 1e-6;
  double norm_eps = 1e-6;
  /// Learnable scale of the context normalization, or none.
  const Tensor<Scalar>* norm_scale = nullptr;
  AuxInput aux_input = AuxInput::raw;
  /// Replaces the gate output with a constant (tests).
  std::optional<double> beta_override;
  /// Receives the per-token beta, shape (..., 1).
  Tensor<Scalar>* beta_out = nullptr;
};

/// k-map: k~ = F(ctx), v = sigmoid(w_v^T aux), x + beta (v - k^T x) k.
/// `x` is (..., d); w_v is (d) or (d, 1).
template <typename Scalar>
Tensor<Scalar> block_forward_kmap(const Tensor<Scalar>& x, const Sublayer<Scalar>& sublayer,
                                  const BetaGate<Scalar>& gate, const Tensor<Scalar>& w_v,
                                  const BlockOptions<Scalar>& options = {});

/// v-map: v = sigmoid(w_p^T F(ctx)), k~ = phi_k(aux), same update.
template <typename Scalar>
Tensor<Scalar> block_forward_vmap(const Tensor<Scalar>& x, const Sublayer<Scalar>& sublayer,
                                  const BetaGate<Scalar>& gate, const Sublayer<Scalar>& phi_k,
                                  const Tensor<Scalar>& w_p, const BlockOptions<Scalar>& options = {});

/// Parameters of one vector-regime delta residual around a sublayer.
template <typename Scalar>
struct DeltaBlock {
  BlockConfig config;
  BetaGate<Scalar> gate;
  Tensor<Scalar> w_v;    // (d, 1), k-map
  Tensor<Scalar> phi_k;  // (d, d), v-map
  Tensor<Scalar> w_p;    // (d, 1), v-map

  static DeltaBlock init(const BlockConfig& config, std::mt19937_64& rng);

  Tensor<Scalar> forward(const Tensor<Scalar>& x, const Sublayer<Scalar>& sublayer,
                         const Tensor<Scalar>* norm_scale, std::optional<double> beta_override = {},
                         Tensor<Scalar>* beta_out = nullptr) const;

  void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

/// The linear direction branch x -> x phi.
template <typename Scalar>
Sublayer<Scalar> linear_map(const Tensor<Scalar>& weight);

}  // namespace ddl
