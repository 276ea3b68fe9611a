#pragma once

#include "ddl/config.hpp"
#include "ddl/delta_block.hpp"
#include "ddl/init.hpp"
#include "ddl/tensor.hpp"

#include <optional>
#include <random>
#include <string>

namespace ddl {

/// Depthwise causal convolution along axis 1 of x (B, T, C...) with kernel
/// (K, C...): out[b, t, c] = sum_{s < K, s <= t} kernel[s, c] x[b, t - s, c].
/// Positions before the sequence start read as zero.
template <typename Scalar>
Tensor<Scalar> causal_conv_time(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel);

enum class ExpandMode { repeat, conv };

template <typename Scalar>
struct Expander {
  ExpandMode mode = ExpandMode::repeat;
  Index d = 0;
  Index d_v = 1;
  Index kernel_size = 4;
  Tensor<Scalar> kernel;  // (K, d, d_v), conv mode; tap 0 is all ones at init

  static Expander repeat(Index d, Index d_v);
  static Expander conv(Index d, Index d_v, Index kernel_size);
  void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

/// emb (B, T, d) -> state (B, T, d, d_v).
template <typename Scalar>
Tensor<Scalar> expand_embedding(const Tensor<Scalar>& emb, const Expander<Scalar>& expander);

enum class CompressAxis { time, channel };

template <typename Scalar>
struct Compressor {
  CompressAxis axis = CompressAxis::time;
  Index d = 0;
  Index d_v = 1;
  Index kernel_size = 4;
  Tensor<Scalar> kernel;  // time: (K, d, d_v), delta at lag 0; channel: (d, d_v), uniform 1/d_v
  Tensor<Scalar> read;    // time: (d_v, 1), uniform 1/d_v

  static Compressor time_axis(Index d, Index d_v, Index kernel_size);
  /// Throws ConfigError unless kernel_size == d_v.
  static Compressor channel_axis(Index d, Index d_v, Index kernel_size);
  static Compressor for_variant(Variant variant, Index d, Index d_v, Index kernel_size);
  void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

/// state (B, T, d, d_v) -> (B, T, d): causal conv over tokens, then the
/// read-vector pool over channels.
template <typename Scalar>
Tensor<Scalar> compress_time_axis(const Tensor<Scalar>& x, const Compressor<Scalar>& c);

/// state (B, T, d, d_v) -> (B, T, d): per-feature weighted sum over channels.
template <typename Scalar>
Tensor<Scalar> compress_channel_axis(const Tensor<Scalar>& x, const Compressor<Scalar>& c);

template <typename Scalar>
Tensor<Scalar> compress(const Tensor<Scalar>& x, const Compressor<Scalar>& c);

/// Compress, process, expand.
///
/// x_in = compress(X); ctx = RMSNorm(x_in); h = F(ctx); beta = gate(ctx)
///   k-map: k~ = h,               v = W_v aux
///   v-map: k~ = phi_k(aux),      v = W_v h
/// with aux = x_in or ctx per `options.aux_input`, W_v (d_v, d), and v passed
/// through a sigmoid when d_v == 1. Returns X + beta k (v^T - k^T X).
template <typename Scalar>
Tensor<Scalar> expanded_block_forward(const Tensor<Scalar>& x, MapMode map_mode, const Compressor<Scalar>& compressor,
                                      const Sublayer<Scalar>& sublayer, const BetaGate<Scalar>& gate,
                                      const Tensor<Scalar>& w_v, const Sublayer<Scalar>& phi_k,
                                      const BlockOptions<Scalar>& options = {});

template <typename Scalar>
struct ExpandedBlock {
  BlockConfig config;
  Index d_v = 1;
  Compressor<Scalar> compressor;
  BetaGate<Scalar> gate;
  Tensor<Scalar> w_v;    // (d_v, d)
  Tensor<Scalar> phi_k;  // (d, d), v-map

  static ExpandedBlock init(const BlockConfig& config, Variant variant, Index d_v, Index state_kernel,
                            std::mt19937_64& rng);

  Tensor<Scalar> forward(const Tensor<Scalar>& x, const Sublayer<Scalar>& sublayer, const Tensor<Scalar>* norm_scale,
                         std::optional<double> beta_override = {}, Tensor<Scalar>* beta_out = nullptr) const;

  void collect(ParameterList<Scalar>& out, const std::string& prefix) const;
};

}  // namespace ddl
