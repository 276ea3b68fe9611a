#include "ddl/backbone.hpp"

#include "ddl/ops.hpp"

#include <cmath>
#include <limits>

namespace ddl {

template <typename S>
Tensor<S> rope(const Tensor<S>& x, double base) {
  if (x.ndim() < 2) throw ShapeError("rope: expected (..., T, head_dim), got " + to_string(x.shape()));
  const Index steps = x.dim(-2), hd = x.dim(-1);
  if (hd % 2 != 0) throw ShapeError("rope: head_dim must be even, got " + std::to_string(hd));
  const Index half = hd / 2;
  const Index outer = x.size() / (steps * hd);

  Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic> cos(half, steps), sin(half, steps);
  for (Index t = 0; t < steps; ++t)
    for (Index i = 0; i < half; ++i) {
      const double angle = static_cast<double>(t) * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      cos(i, t) = static_cast<S>(std::cos(angle));
      sin(i, t) = static_cast<S>(std::sin(angle));
    }

  Tensor<S> out(x.shape());
  const auto& xd = x.data();
  auto& od = out.mutable_data();
  for (Index o = 0; o < outer; ++o)
    for (Index t = 0; t < steps; ++t) {
      const Index base_index = (o * steps + t) * hd;
      const auto a = xd.segment(base_index, half);
      const auto b = xd.segment(base_index + half, half);
      od.segment(base_index, half) = a * cos.col(t) - b * sin.col(t);
      od.segment(base_index + half, half) = a * sin.col(t) + b * cos.col(t);
    }

  Tape* tape = Tape::active();
  if (tape && x.requires_grad()) {
    tape->record({x.node()}, out.node(), [xn = x.node(), on = out.node(), cos, sin, outer, steps, hd, half] {
      auto& gx = xn->ensure_grad();
      const auto& g = on->grad;
      for (Index o = 0; o < outer; ++o)
        for (Index t = 0; t < steps; ++t) {
          const Index base_index = (o * steps + t) * hd;
          const auto ga = g.segment(base_index, half);
          const auto gb = g.segment(base_index + half, half);
          gx.segment(base_index, half) += ga * cos.col(t) + gb * sin.col(t);
          gx.segment(base_index + half, half) += gb * cos.col(t) - ga * sin.col(t);
        }
    });
  }
  return out;
}

template <typename S>
Tensor<S> causal_softmax(const Tensor<S>& scores, S scale) {
  if (scores.ndim() < 2 || scores.dim(-1) != scores.dim(-2))
    throw ShapeError("causal_softmax: expected (..., T, T), got " + to_string(scores.shape()));
  if (finite_checks_enabled() && !scores.data().allFinite())
    throw NonFiniteError("causal_softmax: non-finite scores");
  const Index steps = scores.dim(-1);
  const Index mats = scores.size() / (steps * steps);
  Tensor<S> out = Tensor<S>::zeros(scores.shape());
  const auto& x = scores.data();
  auto& y = out.mutable_data();
  for (Index m = 0; m < mats; ++m)
    for (Index i = 0; i < steps; ++i) {
      const Index row = (m * steps + i) * steps;
      auto yr = y.segment(row, i + 1);
      yr = x.segment(row, i + 1) * scale;
      yr = (yr - yr.maxCoeff()).exp();
      yr /= yr.sum();
    }
  Tape* tape = Tape::active();
  if (tape && scores.requires_grad()) {
    tape->record({scores.node()}, out.node(), [sn = scores.node(), on = out.node(), mats, steps, scale] {
      auto& gs = sn->ensure_grad();
      const auto& g = on->grad;
      const auto& yv = on->data;
      for (Index m = 0; m < mats; ++m)
        for (Index i = 0; i < steps; ++i) {
          const Index row = (m * steps + i) * steps;
          const auto yr = yv.segment(row, i + 1);
          const auto gr = g.segment(row, i + 1);
          const S dot = (yr * gr).sum();
          gs.segment(row, i + 1) += scale * yr * (gr - dot);
        }
    });
  }
  return out;
}

template <typename S>
AttentionLayer<S> AttentionLayer<S>::init(const ModelConfig& c, std::mt19937_64& rng) {
  AttentionLayer a;
  a.d = c.d;
  a.n_heads = c.n_heads;
  a.head_dim = c.head_dim;
  a.max_seq = c.seq_len;
  a.rope_base = c.rope_base;
  a.norm_eps = c.norm_eps;
  const Index inner = c.n_heads * c.head_dim;
  a.wq = linear_parameter<S>(c.d, inner, rng);
  a.wk = linear_parameter<S>(c.d, inner, rng);
  a.wv = linear_parameter<S>(c.d, inner, rng);
  a.wo = linear_parameter<S>(inner, c.d, rng);
  a.q_norm = constant_parameter<S>({c.head_dim}, 1.0);
  a.k_norm = constant_parameter<S>({c.head_dim}, 1.0);
  return a;
}

template <typename S>
Tensor<S> AttentionLayer<S>::forward(const Tensor<S>& x) const {
  if (x.ndim() != 3 || x.dim(2) != d)
    throw ShapeError("attention: expected (B, T, " + std::to_string(d) + "), got " + to_string(x.shape()));
  const Index batch = x.dim(0), steps = x.dim(1);
  if (steps > max_seq)
    throw SequenceOverflowError("attention: sequence length " + std::to_string(steps) + " exceeds configured " +
                                std::to_string(max_seq));
  auto heads = [&](const Tensor<S>& w) {
    return transpose(reshape(matmul(x, w), {batch, steps, n_heads, head_dim}), 1, 2);
  };
  const S eps = static_cast<S>(norm_eps);
  const Tensor<S> q = rope(rms_norm(heads(wq), &q_norm, eps), rope_base);
  const Tensor<S> k = rope(rms_norm(heads(wk), &k_norm, eps), rope_base);
  const Tensor<S> v = heads(wv);
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(head_dim)));
  const Tensor<S> mixed = matmul(causal_softmax(matmul(q, transpose(k)), scale), v);
  return matmul(reshape(transpose(mixed, 1, 2), {batch, steps, n_heads * head_dim}), wo);
}

template <typename S>
void AttentionLayer<S>::collect(ParameterList<S>& out, const std::string& prefix) const {
  out.push_back({prefix + "wq", wq, true});
  out.push_back({prefix + "wk", wk, true});
  out.push_back({prefix + "wv", wv, true});
  out.push_back({prefix + "wo", wo, true});
  out.push_back({prefix + "q_norm", q_norm, false});
  out.push_back({prefix + "k_norm", k_norm, false});
}

template <typename S>
MlpLayer<S> MlpLayer<S>::init(const ModelConfig& c, std::mt19937_64& rng) {
  MlpLayer m;
  const Index hidden = c.mlp_hidden();
  m.w_gate = linear_parameter<S>(c.d, hidden, rng);
  m.w_up = linear_parameter<S>(c.d, hidden, rng);
  m.w_down = linear_parameter<S>(hidden, c.d, rng);
  return m;
}

template <typename S>
Tensor<S> MlpLayer<S>::forward(const Tensor<S>& x) const {
  return matmul(silu(matmul(x, w_gate)) * matmul(x, w_up), w_down);
}

template <typename S>
void MlpLayer<S>::collect(ParameterList<S>& out, const std::string& prefix) const {
  out.push_back({prefix + "w_gate", w_gate, true});
  out.push_back({prefix + "w_up", w_up, true});
  out.push_back({prefix + "w_down", w_down, true});
}

int ForwardTrace::first_nonfinite_layer() const {
  for (std::size_t i = 0; i < layer_finite.size(); ++i)
    if (!layer_finite[i]) return static_cast<int>(i);
  return -1;
}

template <typename S>
Model<S>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const ModelConfig& c = config_;
  std::mt19937_64 rng(seed);
  const bool ddl = c.residual_mode == ResidualMode::ddl;
  expanded_ = ddl && !(c.d_v == 1 && c.variant == Variant::baseline);

  embedding_ = normal_parameter<S>({c.vocab_size, c.d}, 1.0, rng);
  layers_.reserve(static_cast<std::size_t>(c.n_layers));
  for (Index l = 0; l < c.n_layers; ++l) {
    TransformerLayer<S> layer;
    layer.attn_norm = constant_parameter<S>({c.d}, 1.0);
    layer.mlp_norm = constant_parameter<S>({c.d}, 1.0);
    layer.attn = AttentionLayer<S>::init(c, rng);
    layer.mlp = MlpLayer<S>::init(c, rng);
    for (SublayerKind kind : {SublayerKind::attention, SublayerKind::mlp}) {
      if (!c.ddl_on(kind)) continue;
      const BlockConfig bc = c.block(kind);
      if (expanded_) {
        auto block = ExpandedBlock<S>::init(bc, c.variant, c.d_v, c.state_kernel, rng);
        (kind == SublayerKind::attention ? layer.expanded_attn : layer.expanded_mlp) = std::move(block);
      } else {
        auto block = DeltaBlock<S>::init(bc, rng);
        (kind == SublayerKind::attention ? layer.delta_attn : layer.delta_mlp) = std::move(block);
      }
    }
    layers_.push_back(std::move(layer));
  }
  if (expanded_) {
    expander_ = expands_with_conv(c.variant) ? Expander<S>::conv(c.d, c.d_v, c.embed_kernel)
                                             : Expander<S>::repeat(c.d, c.d_v);
    final_compressor_ = Compressor<S>::for_variant(c.variant, c.d, c.d_v, c.state_kernel);
  }
  final_norm_ = constant_parameter<S>({c.d}, 1.0);
  if (!c.tie_embeddings) head_ = normal_parameter<S>({c.d, c.vocab_size}, 0.1 / std::sqrt(static_cast<double>(c.d)), rng);
}

template <typename S>
Tensor<S> Model<S>::embed(std::span<const std::int32_t> tokens, Index batch, Index steps) const {
  if (static_cast<Index>(tokens.size()) != batch * steps)
    throw ShapeError("model: expected " + std::to_string(batch * steps) + " tokens, got " +
                     std::to_string(tokens.size()));
  if (steps > config_.seq_len)
    throw SequenceOverflowError("model: sequence length " + std::to_string(steps) + " exceeds configured " +
                                std::to_string(config_.seq_len));
  return embedding(embedding_, tokens, {batch, steps});
}

template <typename S>
Tensor<S> Model<S>::sublayer_step(const Tensor<S>& x, const TransformerLayer<S>& layer, SublayerKind kind,
                                  const ForwardTrace* trace, std::vector<Tensor<S>>& betas) const {
  const bool attention = kind == SublayerKind::attention;
  const Tensor<S>& norm = attention ? layer.attn_norm : layer.mlp_norm;
  const Sublayer<S> f = attention ? Sublayer<S>([&layer](const Tensor<S>& h) { return layer.attn.forward(h); })
                                  : Sublayer<S>([&layer](const Tensor<S>& h) { return layer.mlp.forward(h); });
  const std::optional<double> override = trace ? trace->beta_override : std::nullopt;
  const auto& delta = attention ? layer.delta_attn : layer.delta_mlp;
  const auto& expanded = attention ? layer.expanded_attn : layer.expanded_mlp;
  Tensor<S> beta;
  if (delta) {
    Tensor<S> out = delta->forward(x, f, &norm, override, &beta);
    betas.push_back(beta);
    return out;
  }
  if (expanded) {
    Tensor<S> out = expanded->forward(x, f, &norm, override, &beta);
    betas.push_back(beta);
    return out;
  }
  const S eps = static_cast<S>(config_.norm_eps);
  if (!expanded_) return x + f(rms_norm(x, &norm, eps));
  // Additive sublayer on an expanded state: the same update is added to every channel.
  return x + unsqueeze(f(rms_norm(mean(x, -1), &norm, eps)), -1);
}

template <typename S>
Tensor<S> Model<S>::hidden(std::span<const std::int32_t> tokens, Index batch, Index steps, ForwardTrace* trace) const {
  Tensor<S> x = embed(tokens, batch, steps);
  if (expanded_) x = expand_embedding(x, expander_);
  if (trace) {
    trace->mean_beta.assign(layers_.size(), std::numeric_limits<double>::quiet_NaN());
    trace->layer_finite.assign(layers_.size(), true);
    trace->beta_values.assign(trace->keep_beta_values ? layers_.size() : 0, {});
  }
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    std::vector<Tensor<S>> betas;
    x = sublayer_step(x, layers_[l], SublayerKind::attention, trace, betas);
    x = sublayer_step(x, layers_[l], SublayerKind::mlp, trace, betas);
    if (!trace) continue;
    trace->layer_finite[l] = x.data().allFinite();
    if (!betas.empty()) {
      double total = 0;
      Index count = 0;
      for (const auto& b : betas) {
        total += b.data().template cast<double>().sum();
        count += b.size();
        if (trace->keep_beta_values)
          trace->beta_values[l].insert(trace->beta_values[l].end(), b.data().begin(), b.data().end());
      }
      trace->mean_beta[l] = total / static_cast<double>(count);
    }
  }
  return x;
}

template <typename S>
Tensor<S> Model<S>::head(const Tensor<S>& stream) const {
  const Tensor<S> x = expanded_ ? compress(stream, final_compressor_) : stream;
  const Tensor<S> h = rms_norm(x, &final_norm_, static_cast<S>(config_.norm_eps));
  return config_.tie_embeddings ? matmul(h, transpose(embedding_)) : matmul(h, head_);
}

template <typename S>
Tensor<S> Model<S>::forward(std::span<const std::int32_t> tokens, Index batch, Index steps, ForwardTrace* trace) const {
  return head(hidden(tokens, batch, steps, trace));
}

template <typename S>
Tensor<S> Model<S>::loss(std::span<const std::int32_t> tokens, std::span<const std::int32_t> targets, Index batch,
                         Index steps, ForwardTrace* trace) const {
  return cross_entropy(forward(tokens, batch, steps, trace), targets);
}

template <typename S>
ParameterList<S> Model<S>::parameters() const {
  ParameterList<S> out;
  out.push_back({"embed.weight", embedding_, true});
  if (expanded_) expander_.collect(out, "expand.");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "attn_norm", layer.attn_norm, false});
    layer.attn.collect(out, p + "attn.");
    if (layer.delta_attn) layer.delta_attn->collect(out, p + "ddl_attn.");
    if (layer.expanded_attn) layer.expanded_attn->collect(out, p + "ddl_attn.");
    out.push_back({p + "mlp_norm", layer.mlp_norm, false});
    layer.mlp.collect(out, p + "mlp.");
    if (layer.delta_mlp) layer.delta_mlp->collect(out, p + "ddl_mlp.");
    if (layer.expanded_mlp) layer.expanded_mlp->collect(out, p + "ddl_mlp.");
  }
  if (expanded_) final_compressor_.collect(out, "final_compress.");
  out.push_back({"final_norm", final_norm_, false});
  if (!config_.tie_embeddings) out.push_back({"head.weight", head_, true});
  return out;
}

template <typename S>
std::size_t Model<S>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += static_cast<std::size_t>(p.tensor.size());
  return n;
}

#define DDL_INSTANTIATE_BACKBONE(S)                      \
  template Tensor<S> rope(const Tensor<S>&, double);     \
  template Tensor<S> causal_softmax(const Tensor<S>&, S);\
  template struct AttentionLayer<S>;                     \
  template struct MlpLayer<S>;                           \
  template class Model<S>;

DDL_INSTANTIATE_BACKBONE(float)
DDL_INSTANTIATE_BACKBONE(double)
#undef DDL_INSTANTIATE_BACKBONE

}  // namespace ddl
