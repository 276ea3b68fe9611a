#pragma once

#include "ddl/config.hpp"
#include "ddl/delta_block.hpp"
#include "ddl/init.hpp"
#include "ddl/state_expansion.hpp"
#include "ddl/tensor.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddl {

class SequenceOverflowError : public std::length_error {
 public:
  using std::length_error::length_error;
};

/// Rotary position embedding over the last axis of x (..., T, head_dim),
/// rotating the pairs (i, i + head_dim/2) by position * base^(-2i/head_dim).
template <typename Scalar>
Tensor<Scalar> rope(const Tensor<Scalar>& x, double base);

/// Row softmax of scale * scores over (..., T, T) restricted to keys j <= i;
/// masked entries are exactly zero.
template <typename Scalar>
Tensor<Scalar> causal_softmax(const Tensor<Scalar>& scores, Scalar scale);

template <typename Scalar>
struct AttentionLayer {
  Index d = 0;
  Index n_heads = 0;
  Index head_dim = 0;
  Index max_seq = 0;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;
  Tensor<Scalar> wq, wk, wv;  // (d, H * head_dim)
  Tensor<Scalar> wo;          // (H * head_dim, d)
  Tensor<Scalar> q_norm;      // (head_dim)
  Tensor<Scalar> k_norm;      // (head_dim)

  static AttentionLayer init(const ModelConfig& config, std::mt19937_64& rng);
  /// Causal multi-head attention on x (B, T, d).
  Tensor<Scalar> forward(const Tensor<Scalar>& x) const;
  void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

template <typename Scalar>
struct MlpLayer {
  Tensor<Scalar> w_gate, w_up;  // (d, hidden)
  Tensor<Scalar> w_down;        // (hidden, d)

  static MlpLayer init(const ModelConfig& config, std::mt19937_64& rng);
  /// W_down (silu(W_gate x) * W_up x)
  Tensor<Scalar> forward(const Tensor<Scalar>& x) const;
  void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

template <typename Scalar>
Tensor<Scalar> attention_forward(const AttentionLayer<Scalar>& layer, const Tensor<Scalar>& x) {
  return layer.forward(x);
}

template <typename Scalar>
Tensor<Scalar> mlp_forward(const MlpLayer<Scalar>& layer, const Tensor<Scalar>& x) {
  return layer.forward(x);
}

template <typename Scalar>
struct TransformerLayer {
  Tensor<Scalar> attn_norm;  // (d)
  Tensor<Scalar> mlp_norm;   // (d)
  AttentionLayer<Scalar> attn;
  MlpLayer<Scalar> mlp;
  // Exactly one of the vector / expanded forms exists for a DDL sublayer.
  std::optional<DeltaBlock<Scalar>> delta_attn, delta_mlp;
  std::optional<ExpandedBlock<Scalar>> expanded_attn, expanded_mlp;
};

/// Per-forward instrumentation and test hooks.
struct ForwardTrace {
  /// Forces every gate to this beta.
  std::optional<double> beta_override;
  /// Mean beta per layer over both sublayers and all tokens; NaN without DDL.
  std::vector<double> mean_beta;
  /// Whether each layer's output was finite.
  std::vector<bool> layer_finite;
  /// When set, every per-token beta of each layer is kept in beta_values.
  bool keep_beta_values = false;
  std::vector<std::vector<double>> beta_values;

  /// Index of the first layer with a non-finite output, or -1.
  int first_nonfinite_layer() const;
};

template <typename Scalar>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  /// True when the residual stream is a (d, d_v) state per token.
  bool expanded() const { return expanded_; }

  /// Token embeddings (B, T, d).
  Tensor<Scalar> embed(std::span<const std::int32_t> tokens, Index batch, Index steps) const;
  /// Residual stream after all layers: (B, T, d), or (B, T, d, d_v) when expanded.
  Tensor<Scalar> hidden(std::span<const std::int32_t> tokens, Index batch, Index steps,
                        ForwardTrace* trace = nullptr) const;
  /// Final readout, normalization and vocabulary projection of a residual stream.
  Tensor<Scalar> head(const Tensor<Scalar>& stream) const;
  /// Logits (B, T, vocab).
  Tensor<Scalar> forward(std::span<const std::int32_t> tokens, Index batch, Index steps,
                         ForwardTrace* trace = nullptr) const;
  /// Mean next-token cross-entropy.
  Tensor<Scalar> loss(std::span<const std::int32_t> tokens, std::span<const std::int32_t> targets, Index batch,
                      Index steps, ForwardTrace* trace = nullptr) const;

  /// Every trainable tensor in a fixed order with stable names.
  ParameterList<Scalar> parameters() const;
  std::size_t parameter_count() const;

  std::vector<TransformerLayer<Scalar>>& layers() { return layers_; }
  const std::vector<TransformerLayer<Scalar>>& layers() const { return layers_; }
  Tensor<Scalar>& embedding_table() { return embedding_; }
  Tensor<Scalar>& final_norm() { return final_norm_; }
  Tensor<Scalar>& head_weight() { return head_; }
  Expander<Scalar>& expander() { return expander_; }
  Compressor<Scalar>& final_compressor() { return final_compressor_; }

 private:
  Tensor<Scalar> sublayer_step(const Tensor<Scalar>& x, const TransformerLayer<Scalar>& layer, SublayerKind kind,
                               const ForwardTrace* trace, std::vector<Tensor<Scalar>>& betas) const;

  ModelConfig config_;
  bool expanded_ = false;
  Tensor<Scalar> embedding_;  // (vocab, d)
  std::vector<TransformerLayer<Scalar>> layers_;
  Expander<Scalar> expander_;
  Compressor<Scalar> final_compressor_;
  Tensor<Scalar> final_norm_;  // (d)
  Tensor<Scalar> head_;        // (d, vocab); unused when tied
};

}  // namespace ddl
