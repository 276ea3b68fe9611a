#include "ddl/delta_block.hpp"

#include "ddl/delta_op.hpp"
#include "ddl/ops.hpp"

#include <algorithm>
#include <cmath>

namespace ddl {

double gate_bias_for(double beta_init) {
  const double p = std::clamp(beta_init / 2.0, 1e-8, 1.0 - 1e-8);
  return std::log(p / (1.0 - p));
}

template <typename S>
BetaGate<S> BetaGate<S>::init(Index d, GateMode mode, Index hidden, double beta_init, std::mt19937_64& rng) {
  BetaGate g;
  g.mode = mode;
  g.beta_init = beta_init;
  if (mode == GateMode::single_linear) {
    g.weight = Tensor<S>::parameter({d, 1}, Tensor<S>::Array::Zero(d));
  } else {
    g.weight = linear_parameter<S>(d, hidden, rng);
    g.hidden_bias = Tensor<S>::parameter({hidden}, Tensor<S>::Array::Zero(hidden));
    g.out_weight = Tensor<S>::parameter({hidden, 1}, Tensor<S>::Array::Zero(hidden));
  }
  g.bias = constant_parameter<S>({1}, gate_bias_for(beta_init));
  return g;
}

template <typename S>
void BetaGate<S>::collect(ParameterList<S>& out, const std::string& prefix) const {
  out.push_back({prefix + "weight", weight, true});
  if (mode == GateMode::two_layer) {
    out.push_back({prefix + "hidden_bias", hidden_bias, false});
    out.push_back({prefix + "out_weight", out_weight, true});
  }
  out.push_back({prefix + "bias", bias, false});
}

template <typename S>
Tensor<double> gate_logit(const Tensor<S>& context, const BetaGate<S>& gate) {
  if (finite_checks_enabled() && !context.data().allFinite())
    throw NonFiniteError("gate_beta: non-finite context");
  const Tensor<double> c = cast<double>(context);
  const Tensor<double> w = cast<double>(gate.weight);
  const Tensor<double> b = cast<double>(gate.bias);
  if (gate.mode == GateMode::single_linear) return matmul(c, w) + b;
  const Tensor<double> hidden = tanh(matmul(c, w) + cast<double>(gate.hidden_bias));
  return matmul(hidden, cast<double>(gate.out_weight)) + b;
}

template <typename S>
Tensor<S> gate_beta(const Tensor<S>& context, const BetaGate<S>& gate) {
  return cast<S>(sigmoid(gate_logit(context, gate)) * 2.0);
}

namespace {

template <typename S>
Shape with_last(const Shape& shape, Index last) {
  Shape out = shape;
  out.back() = last;
  return out;
}

template <typename S>
Tensor<S> as_column(const Tensor<S>& w, Index d, const char* name) {
  if (w.size() != d)
    throw ShapeError(std::string(name) + " has shape " + to_string(w.shape()) + ", expected (" +
                     std::to_string(d) + ")");
  return w.ndim() == 2 ? w : reshape(w, {d, 1});
}

/// Rank-1 update on a (..., d) stream, routed through the (d, 1) state kernel.
template <typename S>
Tensor<S> vector_update(const Tensor<S>& x, const Tensor<S>& k_tilde, const Tensor<S>& v, const Tensor<S>& ctx,
                        const BetaGate<S>& gate, const BlockOptions<S>& opt) {
  const Tensor<S> k = normalize_direction(k_tilde, static_cast<S>(opt.eps_k));
  Tensor<S> beta = opt.beta_override ? Tensor<S>::full(with_last<S>(x.shape(), 1), static_cast<S>(*opt.beta_override))
                                     : gate_beta(ctx, gate);
  if (opt.beta_out) *opt.beta_out = beta;
  Shape state_shape = x.shape();
  state_shape.push_back(1);
  return reshape(delta_update(reshape(x, state_shape), k, beta, v), x.shape());
}

template <typename S>
Tensor<S> lift(const Tensor<S>& x) {
  return x.ndim() == 1 ? reshape(x, {1, x.dim(0)}) : x;
}

}  // namespace

template <typename S>
Tensor<S> block_forward_kmap(const Tensor<S>& x_in, const Sublayer<S>& sublayer, const BetaGate<S>& gate,
                             const Tensor<S>& w_v, const BlockOptions<S>& opt) {
  const Tensor<S> x = lift(x_in);
  const Index d = x.dim(-1);
  const Tensor<S> ctx = rms_norm(x, opt.norm_scale, static_cast<S>(opt.norm_eps));
  const Tensor<S> k_tilde = sublayer(ctx);
  const Tensor<S>& aux = opt.aux_input == AuxInput::raw ? x : ctx;
  const Tensor<S> v = sigmoid(matmul(aux, as_column(w_v, d, "w_v")));
  const Tensor<S> out = vector_update(x, k_tilde, v, ctx, gate, opt);
  return x_in.ndim() == 1 ? reshape(out, x_in.shape()) : out;
}

template <typename S>
Tensor<S> block_forward_vmap(const Tensor<S>& x_in, const Sublayer<S>& sublayer, const BetaGate<S>& gate,
                             const Sublayer<S>& phi_k, const Tensor<S>& w_p, const BlockOptions<S>& opt) {
  const Tensor<S> x = lift(x_in);
  const Index d = x.dim(-1);
  const Tensor<S> ctx = rms_norm(x, opt.norm_scale, static_cast<S>(opt.norm_eps));
  const Tensor<S> h = sublayer(ctx);
  const Tensor<S> v = sigmoid(matmul(h, as_column(w_p, d, "w_p")));
  const Tensor<S> k_tilde = phi_k(opt.aux_input == AuxInput::raw ? x : ctx);
  const Tensor<S> out = vector_update(x, k_tilde, v, ctx, gate, opt);
  return x_in.ndim() == 1 ? reshape(out, x_in.shape()) : out;
}

template <typename S>
Sublayer<S> linear_map(const Tensor<S>& weight) {
  return [weight](const Tensor<S>& x) { return matmul(x, weight); };
}

template <typename S>
DeltaBlock<S> DeltaBlock<S>::init(const BlockConfig& config, std::mt19937_64& rng) {
  DeltaBlock b;
  b.config = config;
  b.gate = BetaGate<S>::init(config.d, config.gate_mode, config.gate_hidden, config.beta_init, rng);
  if (config.map_mode == MapMode::kmap) {
    b.w_v = linear_parameter<S>(config.d, 1, rng);
  } else {
    b.phi_k = linear_parameter<S>(config.d, config.d, rng);
    b.w_p = linear_parameter<S>(config.d, 1, rng);
  }
  return b;
}

template <typename S>
Tensor<S> DeltaBlock<S>::forward(const Tensor<S>& x, const Sublayer<S>& sublayer, const Tensor<S>* norm_scale,
                                 std::optional<double> beta_override, Tensor<S>* beta_out) const {
  BlockOptions<S> opt;
  opt.eps_k = config.eps_k;
  opt.norm_eps = config.norm_eps;
  opt.norm_scale = norm_scale;
  opt.aux_input = config.aux_input;
  opt.beta_override = beta_override;
  opt.beta_out = beta_out;
  if (config.map_mode == MapMode::kmap) return block_forward_kmap(x, sublayer, gate, w_v, opt);
  return block_forward_vmap(x, sublayer, gate, linear_map(phi_k), w_p, opt);
}

template <typename S>
void DeltaBlock<S>::collect(ParameterList<S>& out, const std::string& prefix) const {
  gate.collect(out, prefix + "gate.");
  if (config.map_mode == MapMode::kmap) {
    out.push_back({prefix + "w_v", w_v, true});
  } else {
    out.push_back({prefix + "phi_k", phi_k, true});
    out.push_back({prefix + "w_p", w_p, true});
  }
}

#define DDL_INSTANTIATE_BLOCK(S)                                                                        \
  template struct BetaGate<S>;                                                                          \
  template struct DeltaBlock<S>;                                                                        \
  template Tensor<double> gate_logit(const Tensor<S>&, const BetaGate<S>&);                             \
  template Tensor<S> gate_beta(const Tensor<S>&, const BetaGate<S>&);                                   \
  template Tensor<S> block_forward_kmap(const Tensor<S>&, const Sublayer<S>&, const BetaGate<S>&,       \
                                       const Tensor<S>&, const BlockOptions<S>&);                       \
  template Tensor<S> block_forward_vmap(const Tensor<S>&, const Sublayer<S>&, const BetaGate<S>&,       \
                                       const Sublayer<S>&, const Tensor<S>&, const BlockOptions<S>&);   \
  template Sublayer<S> linear_map(const Tensor<S>&);

DDL_INSTANTIATE_BLOCK(float)
DDL_INSTANTIATE_BLOCK(double)
#undef DDL_INSTANTIATE_BLOCK

}  // namespace ddl
