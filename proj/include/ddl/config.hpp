#pragma once

#include "ddl/tensor.hpp"

#include "json.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace ddl {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class MapMode { kmap, vmap };
enum class GateMode { single_linear, two_layer };
enum class ResidualMode { additive, ddl };
enum class Variant { baseline, ec, cc, cc_ec };
enum class SublayerKind { attention, mlp };
enum class DdlSublayers { both, attention, mlp };
/// Input of the auxiliary branch (w_v under k-map, phi_k under v-map).
enum class AuxInput { raw, context };
enum class Precision { f32, f64 };

std::string to_string(MapMode m);
std::string to_string(GateMode m);
std::string to_string(ResidualMode m);
std::string to_string(Variant v);
std::string to_string(SublayerKind k);
std::string to_string(DdlSublayers s);
std::string to_string(AuxInput a);
std::string to_string(Precision p);

MapMode parse_map_mode(const std::string& s);
ResidualMode parse_residual_mode(const std::string& s);
Variant parse_variant(const std::string& s);
Precision parse_precision(const std::string& s);

/// True for the variants that compress along the value-channel axis.
inline bool compresses_channels(Variant v) { return v == Variant::cc || v == Variant::cc_ec; }
/// True for the variants whose embedding expansion is a learned convolution.
inline bool expands_with_conv(Variant v) { return v == Variant::ec || v == Variant::cc_ec; }

struct BlockConfig {
  MapMode map_mode = MapMode::kmap;
  Index d = 64;
  double eps_k = 1e-6;
  GateMode gate_mode = GateMode::single_linear;
  Index gate_hidden = 32;
  double beta_init = 1.0;
  SublayerKind sublayer = SublayerKind::mlp;
  AuxInput aux_input = AuxInput::raw;
  double norm_eps = 1e-6;

  /// Default wiring: k-map reads w_v from the raw stream, v-map feeds the
  /// normalized context to phi_k.
  static AuxInput default_aux_input(MapMode m, Index d_v) {
    return (m == MapMode::vmap && d_v == 1) ? AuxInput::context : AuxInput::raw;
  }
};

struct ModelConfig {
  Index d = 64;
  Index n_layers = 4;
  Index n_heads = 4;
  Index head_dim = 16;
  Index vocab_size = 256;
  Index seq_len = 128;
  ResidualMode residual_mode = ResidualMode::additive;
  bool tie_embeddings = false;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;

  // ddl.* keys
  Index d_v = 1;
  MapMode map_mode = MapMode::kmap;
  Variant variant = Variant::baseline;
  Index state_kernel = 4;  // ddl.state_shortconv_kernel_size
  Index embed_kernel = 4;  // ddl.input_embed_shortconv_kernel_size
  double beta_init = 1.0;
  GateMode gate_mode = GateMode::single_linear;
  Index gate_hidden = 32;
  double eps_k = 1e-6;
  DdlSublayers sublayers = DdlSublayers::both;
  std::optional<AuxInput> aux_input;

  bool ddl_on(SublayerKind kind) const;
  BlockConfig block(SublayerKind kind) const;
  /// Hidden width of the gated MLP: 8d/3 rounded to the nearest multiple of 8.
  Index mlp_hidden() const;
  void validate() const;
};

struct TrainConfig {
  std::int64_t steps = 2000;
  Index batch_size = 32;
  Index seq_len = 128;
  double lr = 1e-3;
  std::int64_t warmup_steps = 100;
  double min_lr_ratio = 0.1;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  std::int64_t eval_interval = 100;
  Index eval_batches = 20;
  std::uint64_t seed = 1234;
  Precision precision = Precision::f32;
  std::string data = "data/shakespeare.txt";
  std::int64_t checkpoint_interval = 0;  // 0: final checkpoint only
  int threads = 1;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const RunConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Parses a JSON run config. Errors carry `source:line:column` and the
/// offending line.
RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_run_config(const std::string& path);

}  // namespace ddl
