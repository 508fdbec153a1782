#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include "livewatch/agent.hpp"
#include "livewatch/value.hpp"

namespace livewatch::trainer {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TrainerConfig {
  std::uint64_t seed = 42;
  std::int64_t epochs = 10;
  std::int64_t batches_per_epoch = 50;
  std::int64_t batch_size = 32;
  std::vector<std::int64_t> layer_sizes{8, 16, 1};
  double learning_rate = 0.05;
  bool stop_requested = false;

  /// Multiplier on the default weight init; 0 gives an all-zero network.
  double init_scale = 1.0;
  /// Multiplier on the target function; 0 gives all-zero targets.
  double target_scale = 1.0;
  /// Half-width of uniform target noise.
  double noise = 0.05;
  /// Sleep after each batch, to make a run watchable by hand.
  std::chrono::microseconds throttle{0};

  /// Throws ConfigError.
  void validate() const;
};

/// Uniform double in [0, 1) from the top 53 bits; platform independent.
inline double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Fully connected tanh network with a linear output layer.
///
/// Parameters are stored flat, layer by layer: the weight matrix
/// (out x in, row-major) followed by the bias vector.
class Mlp {
 public:
  Mlp(const std::vector<std::int64_t>& layer_sizes, std::mt19937_64& rng, double init_scale);

  std::size_t layers() const noexcept { return sizes_.size() - 1; }
  std::size_t inputs() const noexcept { return sizes_.front(); }
  std::size_t outputs() const noexcept { return sizes_.back(); }
  std::size_t param_count() const noexcept { return params_.size(); }

  std::vector<double>& params() noexcept { return params_; }
  const std::vector<double>& params() const noexcept { return params_; }

  /// Offset and size of layer l's parameters (weights then biases).
  std::size_t layer_offset(std::size_t l) const { return offsets_[l]; }
  std::size_t layer_size(std::size_t l) const { return offsets_[l + 1] - offsets_[l]; }

  /// Outputs for n samples; x is n x inputs(), result n x outputs().
  std::vector<double> predict(const std::vector<double>& x, std::size_t n) const;

  /// Mean squared error over all samples and outputs.
  double loss(const std::vector<double>& x, const std::vector<double>& y, std::size_t n) const;

  /// Loss plus its gradient with respect to params() (resized to match).
  double loss_and_gradient(const std::vector<double>& x, const std::vector<double>& y, std::size_t n,
                           std::vector<double>& grad, std::vector<double>* predictions = nullptr) const;

 private:
  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
};

/// Synthetic regression set: uniform [-1, 1] inputs, a smooth target plus
/// uniform noise.
struct Dataset {
  std::size_t inputs = 0;
  std::size_t outputs = 0;
  std::vector<double> x;
  std::vector<double> y;
  std::size_t size() const noexcept { return inputs == 0 ? 0 : x.size() / inputs; }
};

Dataset make_dataset(std::size_t samples, std::size_t inputs, std::size_t outputs, std::mt19937_64& rng,
                     double target_scale, double noise);

struct BatchMetrics {
  std::int64_t epoch = 0;
  std::int64_t batch = 0;
  double loss = 0.0;
  double duration = 0.0;
  std::vector<double> grad_abs_mean;
  std::vector<double> weight_abs_mean;
  Value sample_pred;
};

struct RunSummary {
  std::int64_t epochs_completed = 0;
  std::int64_t steps = 0;
  bool stopped_early = false;
  std::vector<double> batch_losses;
  std::vector<double> epoch_losses;

  Value to_value() const;
};

/// Deterministic SGD training loop that exposes its state to an agent.
///
/// Observables: epoch, batch, step, loss, duration, grad_abs_mean,
/// weight_abs_mean, sample_pred, epoch_loss, plus the writable lr (alias
/// learning_rate) and stop_requested. Events: "batch" with B set on the last
/// batch of each epoch, and "epoch" with B always set.
class Trainer {
 public:
  /// agent may be null (uninstrumented run). Throws ConfigError.
  Trainer(TrainerConfig config, Agent* agent);

  RunSummary run();

  /// Invoked after each batch's notify; tests use it to act mid-run.
  std::function<void(std::int64_t epoch, std::int64_t batch)> on_batch;

  const BatchMetrics& last_metrics() const noexcept { return metrics_; }
  double learning_rate() const noexcept { return lr_; }
  bool stop_requested() const noexcept { return stop_; }
  const Mlp& model() const noexcept { return model_; }

 private:
  void register_observables();
  std::vector<double> layer_abs_means(const std::vector<double>& v) const;
  Value sample_prediction() const;

  TrainerConfig config_;
  Agent* agent_;
  std::mt19937_64 rng_;
  Mlp model_;
  Dataset data_;

  double lr_;
  bool stop_;
  std::int64_t step_ = 0;
  double epoch_loss_ = 0.0;
  BatchMetrics metrics_;
  std::vector<double> grad_;
  std::vector<double> batch_pred_;
  std::size_t batch_offset_ = 0;
};

struct GradientReport {
  double max_relative_error = 0.0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

inline constexpr std::size_t kGradientCheckMaxParams = 30;
inline constexpr double kGradientCheckStep = 1e-5;

/// Central finite differences against backprop on one batch.
/// Throws ConfigError above kGradientCheckMaxParams parameters.
GradientReport gradient_check_report(const TrainerConfig& config);
double gradient_check(const TrainerConfig& config);

}  // namespace livewatch::trainer
