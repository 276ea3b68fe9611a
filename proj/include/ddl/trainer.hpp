#pragma once

#include "ddl/backbone.hpp"
#include "ddl/checkpoint.hpp"
#include "ddl/config.hpp"
#include "ddl/data.hpp"
#include "ddl/optimizer.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddl {

class NonFiniteLossError : public std::runtime_error {
 public:
  NonFiniteLossError(std::int64_t step, int layer, const std::string& what)
      : std::runtime_error(what), step_(step), layer_(layer) {}
  std::int64_t step() const { return step_; }
  /// First layer with a non-finite output, or -1 if every layer was finite.
  int layer() const { return layer_; }

 private:
  std::int64_t step_;
  int layer_;
};

struct MetricsRow {
  std::int64_t step = 0;
  double train_loss = 0;
  double val_loss = 0;
  double lr = 0;
  double grad_norm = 0;
  std::vector<double> mean_beta;  // NaN for layers without a gate
  double wall_ms = 0;
};

/// step,train_loss,val_loss,lr,grad_norm,mean_beta_0..L-1,wall_ms
std::string metrics_header(Index n_layers);
std::string format_metrics_row(const MetricsRow& row);

struct BetaSummary {
  double mean = 0;
  double min = 0;
  double max = 0;
  std::array<std::int64_t, 10> histogram{};  // ten equal bins over [0, 2]
  std::int64_t count = 0;
};

struct EvalResult {
  double loss = 0;
  double perplexity = 0;
  std::vector<BetaSummary> beta;  // per layer; count 0 without a gate
};

struct TrainOptions {
  /// Receives metrics.csv and checkpoints; empty disables file output.
  std::string out_dir;
  /// Stops after this many total steps (checkpointing there) when in [0, steps).
  std::int64_t stop_after = -1;
  /// Progress lines; null for silence.
  std::ostream* log = nullptr;
};

struct TrainSummary {
  std::int64_t steps = 0;
  double final_train_loss = 0;
  double final_val_loss = 0;
  double perplexity = 0;
  std::vector<MetricsRow> rows;
  std::string metrics_path;
  std::string checkpoint_path;
};

template <typename Scalar>
class Trainer {
 public:
  Trainer(const RunConfig& config, Corpus corpus);
  /// Restores model, optimizer, sampler and step counter from a checkpoint.
  Trainer(const Checkpoint& checkpoint, Corpus corpus);

  /// One optimizer step on a sampled batch; returns the pre-update loss.
  double train_step();
  /// Mean token cross-entropy over the fixed validation batches.
  EvalResult evaluate(bool beta_histogram = false) const;

  Checkpoint checkpoint() const;
  TrainSummary run(const TrainOptions& options);

  Model<Scalar>& model() { return model_; }
  const RunConfig& config() const { return config_; }
  std::int64_t step() const { return step_; }
  double last_lr() const { return last_lr_; }
  double last_grad_norm() const { return last_grad_norm_; }
  const std::vector<double>& last_mean_beta() const { return last_mean_beta_; }

 private:
  void restore(const Checkpoint& checkpoint);

  RunConfig config_;
  Corpus corpus_;
  Model<Scalar> model_;
  AdamW<Scalar> optimizer_;
  BatchSampler sampler_;
  LrSchedule schedule_;
  std::vector<Batch> val_batches_;
  std::int64_t step_ = 0;
  double interval_loss_sum_ = 0;
  std::int64_t interval_count_ = 0;
  double last_lr_ = 0;
  double last_grad_norm_ = 0;
  std::vector<double> last_mean_beta_;
};

extern template class Trainer<float>;
extern template class Trainer<double>;

/// Loads the corpus named by the config and trains at its precision. When
/// `resume` names a checkpoint, training continues from it.
TrainSummary run_training(const RunConfig& config, const TrainOptions& options,
                          const std::optional<std::string>& resume = {});

/// Validation loss of a checkpoint on a corpus (the config's when empty).
EvalResult evaluate_checkpoint(const std::string& checkpoint_path, const std::string& data_path = {});

/// Keeps large freed buffers in the process heap so per-step tensors reuse them.
void configure_allocator();

}  // namespace ddl
