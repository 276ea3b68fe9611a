#include "ddl/trainer.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ddl {

void configure_allocator() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

namespace {

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream out;
  out << std::setprecision(10) << v;
  return out.str();
}

std::uint64_t sampler_seed(std::uint64_t seed) { return seed ^ 0x9e3779b97f4a7c15ULL; }

RunConfig checked(RunConfig c) {
  c.model.validate();
  c.train.validate();
  if (c.model.vocab_size < 256)
    throw ConfigError("model.vocab_size must be at least 256 for byte-level data");
  if (c.train.seq_len > c.model.seq_len)
    throw ConfigError("train.seq_len (" + std::to_string(c.train.seq_len) + ") exceeds model.seq_len (" +
                      std::to_string(c.model.seq_len) + ")");
  return c;
}

template <typename S>
constexpr Precision precision_of() {
  return sizeof(S) == 4 ? Precision::f32 : Precision::f64;
}

}  // namespace

std::string metrics_header(Index n_layers) {
  std::string h = "step,train_loss,val_loss,lr,grad_norm";
  for (Index l = 0; l < n_layers; ++l) h += ",mean_beta_" + std::to_string(l);
  return h + ",wall_ms";
}

std::string format_metrics_row(const MetricsRow& r) {
  std::string s = std::to_string(r.step) + "," + format_number(r.train_loss) + "," + format_number(r.val_loss) +
                  "," + format_number(r.lr) + "," + format_number(r.grad_norm);
  for (double b : r.mean_beta) s += "," + format_number(b);
  std::ostringstream wall;
  wall << std::fixed << std::setprecision(1) << r.wall_ms;
  return s + "," + wall.str();
}

template <typename S>
Trainer<S>::Trainer(const RunConfig& config, Corpus corpus)
    : config_(checked(config)),
      corpus_(std::move(corpus)),
      model_(config_.model, config_.train.seed),
      optimizer_(model_.parameters(), AdamWConfig{config_.train.beta1, config_.train.beta2, config_.train.adam_eps,
                                                  config_.train.weight_decay}),
      sampler_(sampler_seed(config_.train.seed)),
      schedule_{config_.train.lr, config_.train.warmup_steps, config_.train.steps, config_.train.min_lr_ratio} {
  configure_allocator();
  Eigen::setNbThreads(config_.train.threads);
  val_batches_ = validation_batches(corpus_.val, config_.train.batch_size, config_.train.seq_len,
                                    config_.train.eval_batches);
  last_mean_beta_.assign(static_cast<std::size_t>(config_.model.n_layers), std::numeric_limits<double>::quiet_NaN());
}

template <typename S>
Trainer<S>::Trainer(const Checkpoint& ckpt, Corpus corpus)
    : Trainer(run_config_from_json(ckpt.header.at("config")), std::move(corpus)) {
  restore(ckpt);
}

template <typename S>
double Trainer<S>::train_step() {
  const Batch batch = sampler_.sample(corpus_.train, config_.train.batch_size, config_.train.seq_len);
  const double lr = schedule_.at(step_);
  ForwardTrace trace;
  double loss_value = 0;
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor<S> loss = model_.loss(batch.inputs, batch.targets, batch.batch, batch.steps, &trace);
    loss_value = static_cast<double>(loss.item());
    if (!std::isfinite(loss_value)) {
      const int layer = trace.first_nonfinite_layer();
      throw NonFiniteLossError(step_, layer,
                               "non-finite loss at step " + std::to_string(step_) +
                                   (layer >= 0 ? " (first non-finite output in layer " + std::to_string(layer) + ")"
                                               : " (all layer outputs finite; fault in the output head)"));
    }
    backward(loss);
  }
  const double norm = clip_grad_norm(optimizer_.parameters(), config_.train.grad_clip);
  if (!std::isfinite(norm))
    throw NonFiniteLossError(step_, -1, "non-finite gradient norm at step " + std::to_string(step_));
  optimizer_.step(lr);
  optimizer_.zero_grad();

  ++step_;
  interval_loss_sum_ += loss_value;
  ++interval_count_;
  last_lr_ = lr;
  last_grad_norm_ = norm;
  last_mean_beta_ = trace.mean_beta;
  return loss_value;
}

template <typename S>
EvalResult Trainer<S>::evaluate(bool beta_histogram) const {
  const std::size_t layers = static_cast<std::size_t>(config_.model.n_layers);
  EvalResult r;
  double total = 0;
  std::vector<std::vector<double>> betas(layers);
  for (const auto& batch : val_batches_) {
    ForwardTrace trace;
    trace.keep_beta_values = beta_histogram;
    total += static_cast<double>(model_.loss(batch.inputs, batch.targets, batch.batch, batch.steps, &trace).item());
    if (beta_histogram)
      for (std::size_t l = 0; l < layers; ++l)
        betas[l].insert(betas[l].end(), trace.beta_values[l].begin(), trace.beta_values[l].end());
  }
  r.loss = total / static_cast<double>(val_batches_.size());
  r.perplexity = std::exp(r.loss);
  if (beta_histogram) {
    r.beta.resize(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      BetaSummary& s = r.beta[l];
      const auto& v = betas[l];
      s.count = static_cast<std::int64_t>(v.size());
      if (v.empty()) {
        s.mean = s.min = s.max = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      double sum = 0;
      s.min = v.front();
      s.max = v.front();
      for (double b : v) {
        sum += b;
        s.min = std::min(s.min, b);
        s.max = std::max(s.max, b);
        const auto bin = std::clamp<std::int64_t>(static_cast<std::int64_t>(b / 0.2), 0, 9);
        ++s.histogram[static_cast<std::size_t>(bin)];
      }
      s.mean = sum / static_cast<double>(v.size());
    }
  }
  return r;
}

template <typename S>
Checkpoint Trainer<S>::checkpoint() const {
  Checkpoint c;
  c.header = {{"format_version", kCheckpointFormatVersion},
              {"config", to_json(config_)},
              {"dtype", to_string(precision_of<S>())},
              {"step", step_},
              {"adam_step", optimizer_.steps_taken()},
              {"sampler_state", sampler_.state()},
              {"interval_loss_sum", interval_loss_sum_},
              {"interval_count", interval_count_}};
  const auto& params = optimizer_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    c.blobs.push_back(CheckpointBlob::from<S>("param/" + p.name, p.tensor.shape(), p.tensor.data()));
    c.blobs.push_back(CheckpointBlob::from<S>("adam_m/" + p.name, p.tensor.shape(), optimizer_.first_moments()[i]));
    c.blobs.push_back(CheckpointBlob::from<S>("adam_v/" + p.name, p.tensor.shape(), optimizer_.second_moments()[i]));
  }
  return c;
}

template <typename S>
void Trainer<S>::restore(const Checkpoint& c) {
  const std::string dtype = c.header.value("dtype", "");
  if (dtype != to_string(precision_of<S>()))
    throw CheckpointError("checkpoint dtype '" + dtype + "' does not match trainer precision");
  auto params = optimizer_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto load = [&](const std::string& key) {
      const CheckpointBlob& b = c.blob(key + p.name);
      if (b.shape != p.tensor.shape())
        throw CheckpointError("tensor '" + key + p.name + "' has shape " + to_string(b.shape) + ", expected " +
                              to_string(p.tensor.shape()));
      return b.values<S>();
    };
    p.tensor.mutable_data() = load("param/");
    optimizer_.first_moments()[i] = load("adam_m/");
    optimizer_.second_moments()[i] = load("adam_v/");
  }
  step_ = c.header.at("step").get<std::int64_t>();
  optimizer_.set_steps_taken(c.header.at("adam_step").get<std::int64_t>());
  sampler_.set_state(c.header.at("sampler_state").get<std::string>());
  interval_loss_sum_ = c.header.at("interval_loss_sum").get<double>();
  interval_count_ = c.header.at("interval_count").get<std::int64_t>();
}

template <typename S>
TrainSummary Trainer<S>::run(const TrainOptions& options) {
  namespace fs = std::filesystem;
  TrainSummary summary;
  const auto& tc = config_.train;
  const std::int64_t end = (options.stop_after >= 0 && options.stop_after < tc.steps) ? options.stop_after : tc.steps;
  std::ofstream metrics;
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    summary.metrics_path = (fs::path(options.out_dir) / "metrics.csv").string();
    const bool append = step_ > 0 && fs::exists(summary.metrics_path);
    metrics.open(summary.metrics_path, append ? std::ios::app : std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write '" + summary.metrics_path + "'");
    if (!append) metrics << metrics_header(config_.model.n_layers) << '\n';
  }
  auto save = [&](const std::string& file) {
    if (options.out_dir.empty()) return;
    summary.checkpoint_path = (fs::path(options.out_dir) / file).string();
    write_checkpoint(summary.checkpoint_path, checkpoint());
  };

  const auto start = std::chrono::steady_clock::now();
  double last_loss = std::numeric_limits<double>::quiet_NaN();
  while (step_ < end) {
    last_loss = train_step();
    if (step_ % tc.eval_interval == 0 || step_ == tc.steps) {
      MetricsRow row;
      row.step = step_;
      row.train_loss = interval_loss_sum_ / static_cast<double>(interval_count_);
      row.val_loss = evaluate().loss;
      row.lr = last_lr_;
      row.grad_norm = last_grad_norm_;
      row.mean_beta = last_mean_beta_;
      row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      interval_loss_sum_ = 0;
      interval_count_ = 0;
      if (metrics) metrics << format_metrics_row(row) << std::endl;
      if (options.log)
        *options.log << "step " << row.step << "  train " << format_number(row.train_loss) << "  val "
                     << format_number(row.val_loss) << "  lr " << format_number(row.lr) << "  |g| "
                     << format_number(row.grad_norm) << "  " << std::fixed << std::setprecision(1)
                     << row.wall_ms / 1000.0 << " s" << std::defaultfloat << std::endl;
      summary.rows.push_back(row);
    }
    if (tc.checkpoint_interval > 0 && step_ % tc.checkpoint_interval == 0 && step_ < end)
      save("checkpoint_" + std::to_string(step_) + ".ddl");
  }
  save("checkpoint.ddl");

  summary.steps = step_;
  summary.final_train_loss = last_loss;
  if (!summary.rows.empty() && summary.rows.back().step == step_) {
    summary.final_val_loss = summary.rows.back().val_loss;
  } else {
    summary.final_val_loss = evaluate().loss;
  }
  summary.perplexity = std::exp(summary.final_val_loss);
  return summary;
}

template class Trainer<float>;
template class Trainer<double>;

namespace {

Corpus load_corpus(const std::string& path) { return split_corpus(ingest_corpus(path)); }

}  // namespace

TrainSummary run_training(const RunConfig& config, const TrainOptions& options,
                          const std::optional<std::string>& resume) {
  if (resume) {
    const Checkpoint ckpt = read_checkpoint(*resume);
    const RunConfig saved = run_config_from_json(ckpt.header.at("config"));
    Corpus corpus = load_corpus(saved.train.data);
    if (saved.train.precision == Precision::f64) return Trainer<double>(ckpt, std::move(corpus)).run(options);
    return Trainer<float>(ckpt, std::move(corpus)).run(options);
  }
  Corpus corpus = load_corpus(config.train.data);
  if (config.train.precision == Precision::f64) return Trainer<double>(config, std::move(corpus)).run(options);
  return Trainer<float>(config, std::move(corpus)).run(options);
}

EvalResult evaluate_checkpoint(const std::string& checkpoint_path, const std::string& data_path) {
  const Checkpoint ckpt = read_checkpoint(checkpoint_path);
  if (!ckpt.header.contains("config")) throw CheckpointError("checkpoint header has no config");
  const RunConfig saved = run_config_from_json(ckpt.header.at("config"));
  Corpus corpus = load_corpus(data_path.empty() ? saved.train.data : data_path);
  if (ckpt.header.value("dtype", "") == "f64") return Trainer<double>(ckpt, std::move(corpus)).evaluate(true);
  return Trainer<float>(ckpt, std::move(corpus)).evaluate(true);
}

}  // namespace ddl
