#include "ddl/state_expansion.hpp"

#include "ddl/delta_op.hpp"
#include "ddl/ops.hpp"

namespace ddl {

template <typename S>
Tensor<S> causal_conv_time(const Tensor<S>& x, const Tensor<S>& kernel) {
  if (x.ndim() < 3) throw ShapeError("causal_conv_time: input must be (B, T, C...), got " + to_string(x.shape()));
  const Index batch = x.dim(0), steps = x.dim(1);
  const Index channels = x.size() / (batch * steps);
  if (kernel.ndim() < 1 || kernel.size() != kernel.dim(0) * channels)
    throw ShapeError("causal_conv_time: kernel " + to_string(kernel.shape()) + " does not match input " +
                     to_string(x.shape()));
  const Index taps = kernel.dim(0);
  if (finite_checks_enabled() && (!x.data().allFinite() || !kernel.data().allFinite()))
    throw NonFiniteError("causal_conv_time: non-finite input");

  Tensor<S> out(x.shape());
  const auto& xd = x.data();
  const auto& w = kernel.data();
  auto& od = out.mutable_data();
  od.setZero();
  for (Index b = 0; b < batch; ++b)
    for (Index t = 0; t < steps; ++t) {
      auto o = od.segment((b * steps + t) * channels, channels);
      for (Index s = 0; s < taps && s <= t; ++s)
        o += w.segment(s * channels, channels) * xd.segment((b * steps + t - s) * channels, channels);
    }

  Tape* tape = Tape::active();
  if (tape && (x.requires_grad() || kernel.requires_grad())) {
    tape->record({x.node(), kernel.node()}, out.node(),
                 [xn = x.node(), kn = kernel.node(), on = out.node(), batch, steps, channels, taps] {
                   const auto& g = on->grad;
                   for (Index b = 0; b < batch; ++b)
                     for (Index t = 0; t < steps; ++t) {
                       const auto gs = g.segment((b * steps + t) * channels, channels);
                       for (Index s = 0; s < taps && s <= t; ++s) {
                         const Index src = (b * steps + t - s) * channels;
                         if (xn->requires_grad)
                           xn->ensure_grad().segment(src, channels) += kn->data.segment(s * channels, channels) * gs;
                         if (kn->requires_grad)
                           kn->ensure_grad().segment(s * channels, channels) += xn->data.segment(src, channels) * gs;
                       }
                     }
                 });
  }
  return out;
}

template <typename S>
Expander<S> Expander<S>::repeat(Index d, Index d_v) {
  Expander e;
  e.mode = ExpandMode::repeat;
  e.d = d;
  e.d_v = d_v;
  e.kernel_size = 0;
  return e;
}

template <typename S>
Expander<S> Expander<S>::conv(Index d, Index d_v, Index kernel_size) {
  if (kernel_size < 1) throw ConfigError("embedding expansion kernel size must be positive");
  Expander e;
  e.mode = ExpandMode::conv;
  e.d = d;
  e.d_v = d_v;
  e.kernel_size = kernel_size;
  typename Tensor<S>::Array w = Tensor<S>::Array::Zero(kernel_size * d * d_v);
  w.head(d * d_v).setOnes();
  e.kernel = Tensor<S>::parameter({kernel_size, d, d_v}, std::move(w));
  return e;
}

template <typename S>
void Expander<S>::collect(ParameterList<S>& out, const std::string& prefix) const {
  if (mode == ExpandMode::conv) out.push_back({prefix + "kernel", kernel, true});
}

template <typename S>
Tensor<S> expand_embedding(const Tensor<S>& emb, const Expander<S>& e) {
  if (emb.ndim() != 3 || emb.dim(-1) != e.d)
    throw ShapeError("expand_embedding: expected (B, T, " + std::to_string(e.d) + "), got " + to_string(emb.shape()));
  const Tensor<S> repeated = broadcast_to(unsqueeze(emb, -1), {emb.dim(0), emb.dim(1), e.d, e.d_v});
  return e.mode == ExpandMode::repeat ? repeated : causal_conv_time(repeated, e.kernel);
}

template <typename S>
Compressor<S> Compressor<S>::time_axis(Index d, Index d_v, Index kernel_size) {
  if (kernel_size < 1) throw ConfigError("state compression kernel size must be positive");
  Compressor c;
  c.axis = CompressAxis::time;
  c.d = d;
  c.d_v = d_v;
  c.kernel_size = kernel_size;
  typename Tensor<S>::Array w = Tensor<S>::Array::Zero(kernel_size * d * d_v);
  w.head(d * d_v).setOnes();
  c.kernel = Tensor<S>::parameter({kernel_size, d, d_v}, std::move(w));
  c.read = constant_parameter<S>({d_v, 1}, 1.0 / static_cast<double>(d_v));
  return c;
}

template <typename S>
Compressor<S> Compressor<S>::channel_axis(Index d, Index d_v, Index kernel_size) {
  if (kernel_size != d_v)
    throw ConfigError("channel-axis compression kernel size (" + std::to_string(kernel_size) +
                      ") must equal d_v (" + std::to_string(d_v) + ") so the convolution returns length 1");
  Compressor c;
  c.axis = CompressAxis::channel;
  c.d = d;
  c.d_v = d_v;
  c.kernel_size = kernel_size;
  c.kernel = constant_parameter<S>({d, d_v}, 1.0 / static_cast<double>(d_v));
  return c;
}

template <typename S>
Compressor<S> Compressor<S>::for_variant(Variant variant, Index d, Index d_v, Index kernel_size) {
  return compresses_channels(variant) ? channel_axis(d, d_v, kernel_size) : time_axis(d, d_v, kernel_size);
}

template <typename S>
void Compressor<S>::collect(ParameterList<S>& out, const std::string& prefix) const {
  out.push_back({prefix + "kernel", kernel, true});
  if (axis == CompressAxis::time) out.push_back({prefix + "read", read, true});
}

namespace {

template <typename S>
void check_state(const Tensor<S>& x, Index d, Index d_v, const char* where) {
  if (x.ndim() != 4 || x.dim(2) != d || x.dim(3) != d_v)
    throw ShapeError(std::string(where) + ": expected state (B, T, " + std::to_string(d) + ", " +
                     std::to_string(d_v) + "), got " + to_string(x.shape()));
}

}  // namespace

template <typename S>
Tensor<S> compress_time_axis(const Tensor<S>& x, const Compressor<S>& c) {
  check_state(x, c.d, c.d_v, "compress_time_axis");
  const Tensor<S> mixed = causal_conv_time(x, c.kernel);
  return reshape(matmul(mixed, c.read), {x.dim(0), x.dim(1), c.d});
}

template <typename S>
Tensor<S> compress_channel_axis(const Tensor<S>& x, const Compressor<S>& c) {
  check_state(x, c.d, c.d_v, "compress_channel_axis");
  if (c.kernel_size != c.d_v)
    throw ConfigError("channel-axis compression kernel size must equal d_v");
  return sum(x * c.kernel, -1);
}

template <typename S>
Tensor<S> compress(const Tensor<S>& x, const Compressor<S>& c) {
  return c.axis == CompressAxis::time ? compress_time_axis(x, c) : compress_channel_axis(x, c);
}

template <typename S>
Tensor<S> expanded_block_forward(const Tensor<S>& x, MapMode map_mode, const Compressor<S>& compressor,
                                 const Sublayer<S>& sublayer, const BetaGate<S>& gate, const Tensor<S>& w_v,
                                 const Sublayer<S>& phi_k, const BlockOptions<S>& opt) {
  const Index d_v = compressor.d_v;
  if (w_v.ndim() != 2 || w_v.dim(0) != d_v || w_v.dim(1) != compressor.d)
    throw ShapeError("expanded_block_forward: W_v has shape " + to_string(w_v.shape()) + ", expected (" +
                     std::to_string(d_v) + ", " + std::to_string(compressor.d) + ")");
  const Tensor<S> x_in = compress(x, compressor);
  const Tensor<S> ctx = rms_norm(x_in, opt.norm_scale, static_cast<S>(opt.norm_eps));
  const Tensor<S> h = sublayer(ctx);
  const Tensor<S>& aux = opt.aux_input == AuxInput::raw ? x_in : ctx;
  const Tensor<S> w_v_t = transpose(w_v);

  Tensor<S> k_tilde, v;
  if (map_mode == MapMode::kmap) {
    k_tilde = h;
    v = matmul(aux, w_v_t);
  } else {
    k_tilde = phi_k(aux);
    v = matmul(h, w_v_t);
  }
  if (d_v == 1) v = sigmoid(v);

  const Tensor<S> k = normalize_direction(k_tilde, static_cast<S>(opt.eps_k));
  Tensor<S> beta = opt.beta_override
                       ? Tensor<S>::full({x.dim(0), x.dim(1), 1}, static_cast<S>(*opt.beta_override))
                       : gate_beta(ctx, gate);
  if (opt.beta_out) *opt.beta_out = beta;
  return delta_update(x, k, beta, v);
}

template <typename S>
ExpandedBlock<S> ExpandedBlock<S>::init(const BlockConfig& config, Variant variant, Index d_v, Index state_kernel,
                                        std::mt19937_64& rng) {
  ExpandedBlock b;
  b.config = config;
  b.d_v = d_v;
  b.compressor = Compressor<S>::for_variant(variant, config.d, d_v, state_kernel);
  b.gate = BetaGate<S>::init(config.d, config.gate_mode, config.gate_hidden, config.beta_init, rng);
  b.w_v = normal_parameter<S>({d_v, config.d}, 1.0 / std::sqrt(static_cast<double>(config.d)), rng);
  if (config.map_mode == MapMode::vmap) b.phi_k = linear_parameter<S>(config.d, config.d, rng);
  return b;
}

template <typename S>
Tensor<S> ExpandedBlock<S>::forward(const Tensor<S>& x, const Sublayer<S>& sublayer, const Tensor<S>* norm_scale,
                                    std::optional<double> beta_override, Tensor<S>* beta_out) const {
  BlockOptions<S> opt;
  opt.eps_k = config.eps_k;
  opt.norm_eps = config.norm_eps;
  opt.norm_scale = norm_scale;
  opt.aux_input = config.aux_input;
  opt.beta_override = beta_override;
  opt.beta_out = beta_out;
  const Sublayer<S> phi = config.map_mode == MapMode::vmap ? linear_map(phi_k) : Sublayer<S>{};
  return expanded_block_forward(x, config.map_mode, compressor, sublayer, gate, w_v, phi, opt);
}

template <typename S>
void ExpandedBlock<S>::collect(ParameterList<S>& out, const std::string& prefix) const {
  compressor.collect(out, prefix + "compress.");
  gate.collect(out, prefix + "gate.");
  out.push_back({prefix + "w_v", w_v, true});
  if (config.map_mode == MapMode::vmap) out.push_back({prefix + "phi_k", phi_k, true});
}

#define DDL_INSTANTIATE_EXPANSION(S)                                                                   \
  template Tensor<S> causal_conv_time(const Tensor<S>&, const Tensor<S>&);                             \
  template struct Expander<S>;                                                                         \
  template struct Compressor<S>;                                                                       \
  template struct ExpandedBlock<S>;                                                                    \
  template Tensor<S> expand_embedding(const Tensor<S>&, const Expander<S>&);                           \
  template Tensor<S> compress_time_axis(const Tensor<S>&, const Compressor<S>&);                       \
  template Tensor<S> compress_channel_axis(const Tensor<S>&, const Compressor<S>&);                    \
  template Tensor<S> compress(const Tensor<S>&, const Compressor<S>&);                                 \
  template Tensor<S> expanded_block_forward(const Tensor<S>&, MapMode, const Compressor<S>&,           \
                                            const Sublayer<S>&, const BetaGate<S>&, const Tensor<S>&,  \
                                            const Sublayer<S>&, const BlockOptions<S>&);

DDL_INSTANTIATE_EXPANSION(float)
DDL_INSTANTIATE_EXPANSION(double)
#undef DDL_INSTANTIATE_EXPANSION

}  // namespace ddl
