#include "ddl/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace ddl {

using nlohmann::json;

std::string to_string(MapMode m) { return m == MapMode::kmap ? "kmap" : "vmap"; }
std::string to_string(GateMode m) { return m == GateMode::single_linear ? "single-linear" : "two-layer"; }
std::string to_string(ResidualMode m) { return m == ResidualMode::additive ? "baseline" : "ddl"; }
std::string to_string(SublayerKind k) { return k == SublayerKind::attention ? "attention" : "mlp"; }
std::string to_string(AuxInput a) { return a == AuxInput::raw ? "raw" : "context"; }
std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

std::string to_string(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::ec: return "ec";
    case Variant::cc: return "cc";
    case Variant::cc_ec: return "cc-ec";
  }
  return "baseline";
}

std::string to_string(DdlSublayers s) {
  switch (s) {
    case DdlSublayers::both: return "both";
    case DdlSublayers::attention: return "attention";
    case DdlSublayers::mlp: return "mlp";
  }
  return "both";
}

MapMode parse_map_mode(const std::string& s) {
  if (s == "kmap" || s == "k-map") return MapMode::kmap;
  if (s == "vmap" || s == "v-map") return MapMode::vmap;
  throw ConfigError("unknown map mode '" + s + "' (expected kmap or vmap)");
}

ResidualMode parse_residual_mode(const std::string& s) {
  if (s == "baseline" || s == "additive") return ResidualMode::additive;
  if (s == "ddl") return ResidualMode::ddl;
  throw ConfigError("unknown residual mode '" + s + "' (expected baseline or ddl)");
}

Variant parse_variant(const std::string& s) {
  if (s == "baseline") return Variant::baseline;
  if (s == "ec") return Variant::ec;
  if (s == "cc") return Variant::cc;
  if (s == "cc-ec" || s == "cc_ec") return Variant::cc_ec;
  throw ConfigError("unknown variant '" + s + "' (expected baseline, ec, cc or cc-ec)");
}

Precision parse_precision(const std::string& s) {
  if (s == "f32" || s == "float32") return Precision::f32;
  if (s == "f64" || s == "float64") return Precision::f64;
  throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

namespace {

DdlSublayers parse_sublayers(const std::string& s) {
  if (s == "both") return DdlSublayers::both;
  if (s == "attention") return DdlSublayers::attention;
  if (s == "mlp") return DdlSublayers::mlp;
  throw ConfigError("unknown ddl sublayer selection '" + s + "'");
}

AuxInput parse_aux_input(const std::string& s) {
  if (s == "raw") return AuxInput::raw;
  if (s == "context") return AuxInput::context;
  throw ConfigError("unknown aux input '" + s + "'");
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& section) {
  if (!j.is_object()) throw ConfigError("section '" + section + "' must be an object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown key '" + section + "." + key + "'");
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for '" + section + "." + key + "': " + e.what());
  }
}

}  // namespace

bool ModelConfig::ddl_on(SublayerKind kind) const {
  if (residual_mode != ResidualMode::ddl) return false;
  switch (sublayers) {
    case DdlSublayers::both: return true;
    case DdlSublayers::attention: return kind == SublayerKind::attention;
    case DdlSublayers::mlp: return kind == SublayerKind::mlp;
  }
  return false;
}

BlockConfig ModelConfig::block(SublayerKind kind) const {
  BlockConfig b;
  b.map_mode = map_mode;
  b.d = d;
  b.eps_k = eps_k;
  b.gate_mode = gate_mode;
  b.gate_hidden = gate_hidden;
  b.beta_init = beta_init;
  b.sublayer = kind;
  b.aux_input = aux_input.value_or(BlockConfig::default_aux_input(map_mode, d_v));
  b.norm_eps = norm_eps;
  return b;
}

Index ModelConfig::mlp_hidden() const {
  const double target = 8.0 * static_cast<double>(d) / 3.0;
  const Index h = static_cast<Index>(std::llround(target / 8.0)) * 8;
  return h < 8 ? 8 : h;
}

void ModelConfig::validate() const {
  auto positive = [](Index v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(d, "model.d");
  positive(n_layers, "model.n_layers");
  positive(n_heads, "model.n_heads");
  positive(head_dim, "model.head_dim");
  positive(vocab_size, "model.vocab_size");
  positive(seq_len, "model.seq_len");
  positive(d_v, "ddl.d_v");
  positive(state_kernel, "ddl.state_shortconv_kernel_size");
  positive(embed_kernel, "ddl.input_embed_shortconv_kernel_size");
  positive(gate_hidden, "ddl.beta_hidden_size");
  if (head_dim % 2 != 0) throw ConfigError("model.head_dim must be even for rotary embeddings");
  if (!(beta_init >= 0.0 && beta_init <= 2.0)) throw ConfigError("ddl.beta_init must lie in [0, 2]");
  if (!(eps_k >= 0.0)) throw ConfigError("ddl.eps_k must be non-negative");
  if (residual_mode == ResidualMode::ddl && compresses_channels(variant) && d_v > 1 &&
      state_kernel != d_v)
    throw ConfigError("ddl.state_shortconv_kernel_size (" + std::to_string(state_kernel) +
                      ") must equal d_v (" + std::to_string(d_v) +
                      ") for channel-axis compression so the convolution returns length 1");
}

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("train.steps must be non-negative");
  if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (seq_len < 1) throw ConfigError("train.seq_len must be positive");
  if (!(lr > 0)) throw ConfigError("train.lr must be positive");
  if (warmup_steps < 0) throw ConfigError("train.warmup_steps must be non-negative");
  if (!(min_lr_ratio >= 0 && min_lr_ratio <= 1)) throw ConfigError("train.min_lr_ratio must lie in [0, 1]");
  if (!(grad_clip > 0)) throw ConfigError("train.grad_clip must be positive");
  if (eval_interval < 1) throw ConfigError("train.eval_interval must be positive");
  if (eval_batches < 1) throw ConfigError("train.eval_batches must be positive");
  if (threads < 1) throw ConfigError("train.threads must be positive");
}

json to_json(const ModelConfig& c) {
  json model = {{"d", c.d},
                {"n_layers", c.n_layers},
                {"n_heads", c.n_heads},
                {"head_dim", c.head_dim},
                {"vocab_size", c.vocab_size},
                {"seq_len", c.seq_len},
                {"residual_mode", to_string(c.residual_mode)},
                {"tie_embeddings", c.tie_embeddings},
                {"rope_base", c.rope_base},
                {"norm_eps", c.norm_eps}};
  json ddl = {{"d_v", c.d_v},
              {"map_mode", to_string(c.map_mode)},
              {"variant", to_string(c.variant)},
              {"state_shortconv_kernel_size", c.state_kernel},
              {"input_embed_shortconv_kernel_size", c.embed_kernel},
              {"beta_init", c.beta_init},
              {"beta_single_linear", c.gate_mode == GateMode::single_linear},
              {"beta_hidden_size", c.gate_hidden},
              {"eps_k", c.eps_k},
              {"sublayers", to_string(c.sublayers)}};
  if (c.aux_input) ddl["aux_input"] = to_string(*c.aux_input);
  return {{"model", model}, {"ddl", ddl}};
}

json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"seq_len", c.seq_len},
          {"lr", c.lr},
          {"warmup_steps", c.warmup_steps},
          {"min_lr_ratio", c.min_lr_ratio},
          {"weight_decay", c.weight_decay},
          {"adam_beta1", c.beta1},
          {"adam_beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"grad_clip", c.grad_clip},
          {"eval_interval", c.eval_interval},
          {"eval_batches", c.eval_batches},
          {"seed", c.seed},
          {"precision", to_string(c.precision)},
          {"data", c.data},
          {"checkpoint_interval", c.checkpoint_interval},
          {"threads", c.threads}};
}

json to_json(const RunConfig& c) {
  json j = to_json(c.model);
  j["train"] = to_json(c.train);
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  if (j.contains("model")) {
    const json& m = j.at("model");
    reject_unknown(m,
                   {"d", "n_layers", "n_heads", "head_dim", "vocab_size", "seq_len", "residual_mode",
                    "tie_embeddings", "rope_base", "norm_eps"},
                   "model");
    read(m, "d", c.d, "model");
    read(m, "n_layers", c.n_layers, "model");
    read(m, "n_heads", c.n_heads, "model");
    read(m, "head_dim", c.head_dim, "model");
    read(m, "vocab_size", c.vocab_size, "model");
    read(m, "seq_len", c.seq_len, "model");
    std::string mode = to_string(c.residual_mode);
    read(m, "residual_mode", mode, "model");
    c.residual_mode = parse_residual_mode(mode);
    read(m, "tie_embeddings", c.tie_embeddings, "model");
    read(m, "rope_base", c.rope_base, "model");
    read(m, "norm_eps", c.norm_eps, "model");
  }
  if (j.contains("ddl")) {
    const json& d = j.at("ddl");
    reject_unknown(d,
                   {"d_v", "map_mode", "variant", "state_shortconv_kernel_size",
                    "input_embed_shortconv_kernel_size", "beta_init", "beta_single_linear",
                    "beta_hidden_size", "eps_k", "sublayers", "aux_input"},
                   "ddl");
    read(d, "d_v", c.d_v, "ddl");
    std::string s = to_string(c.map_mode);
    read(d, "map_mode", s, "ddl");
    c.map_mode = parse_map_mode(s);
    s = to_string(c.variant);
    read(d, "variant", s, "ddl");
    c.variant = parse_variant(s);
    read(d, "state_shortconv_kernel_size", c.state_kernel, "ddl");
    read(d, "input_embed_shortconv_kernel_size", c.embed_kernel, "ddl");
    read(d, "beta_init", c.beta_init, "ddl");
    bool single = c.gate_mode == GateMode::single_linear;
    read(d, "beta_single_linear", single, "ddl");
    c.gate_mode = single ? GateMode::single_linear : GateMode::two_layer;
    read(d, "beta_hidden_size", c.gate_hidden, "ddl");
    read(d, "eps_k", c.eps_k, "ddl");
    s = to_string(c.sublayers);
    read(d, "sublayers", s, "ddl");
    c.sublayers = parse_sublayers(s);
    if (d.contains("aux_input")) {
      std::string a;
      read(d, "aux_input", a, "ddl");
      c.aux_input = parse_aux_input(a);
    }
  }
  return c;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  if (!j.contains("train")) return c;
  const json& t = j.at("train");
  reject_unknown(t,
                 {"steps", "batch_size", "seq_len", "lr", "warmup_steps", "min_lr_ratio", "weight_decay",
                  "adam_beta1", "adam_beta2", "adam_eps", "grad_clip", "eval_interval", "eval_batches",
                  "seed", "precision", "data", "checkpoint_interval", "threads"},
                 "train");
  read(t, "steps", c.steps, "train");
  read(t, "batch_size", c.batch_size, "train");
  read(t, "seq_len", c.seq_len, "train");
  read(t, "lr", c.lr, "train");
  read(t, "warmup_steps", c.warmup_steps, "train");
  read(t, "min_lr_ratio", c.min_lr_ratio, "train");
  read(t, "weight_decay", c.weight_decay, "train");
  read(t, "adam_beta1", c.beta1, "train");
  read(t, "adam_beta2", c.beta2, "train");
  read(t, "adam_eps", c.adam_eps, "train");
  read(t, "grad_clip", c.grad_clip, "train");
  read(t, "eval_interval", c.eval_interval, "train");
  read(t, "eval_batches", c.eval_batches, "train");
  read(t, "seed", c.seed, "train");
  std::string p = to_string(c.precision);
  read(t, "precision", p, "train");
  c.precision = parse_precision(p);
  read(t, "data", c.data, "train");
  read(t, "checkpoint_interval", c.checkpoint_interval, "train");
  read(t, "threads", c.threads, "train");
  return c;
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config root must be an object");
  reject_unknown(j, {"model", "ddl", "train"}, "config");
  return {model_config_from_json(j), train_config_from_json(j)};
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t byte = e.byte == 0 ? 0 : e.byte - 1;
    if (byte > text.size()) byte = text.size();
    std::size_t line = 1, line_start = 0;
    for (std::size_t i = 0; i < byte; ++i)
      if (text[i] == '\n') {
        ++line;
        line_start = i + 1;
      }
    std::size_t line_end = text.find('\n', line_start);
    if (line_end == std::string::npos) line_end = text.size();
    std::ostringstream msg;
    msg << source << ':' << line << ':' << (byte - line_start + 1) << ": " << e.what() << "\n  "
        << text.substr(line_start, line_end - line_start);
    throw ConfigError(msg.str());
  }
  try {
    return run_config_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_run_config(buffer.str(), path);
}

}  // namespace ddl
