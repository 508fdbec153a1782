#include "livewatch/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <thread>

namespace livewatch::trainer {

void TrainerConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (batches_per_epoch < 1) throw ConfigError("batches_per_epoch must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (layer_sizes.size() < 2) throw ConfigError("layer_sizes needs at least an input and an output size");
  for (auto s : layer_sizes)
    if (s < 1) throw ConfigError("layer sizes must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (!(init_scale >= 0.0) || !std::isfinite(init_scale)) throw ConfigError("init_scale must be non-negative");
  if (!std::isfinite(target_scale)) throw ConfigError("target_scale must be finite");
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("noise must be non-negative");
  if (throttle.count() < 0) throw ConfigError("throttle must be non-negative");
}

// ---------------------------------------------------------------------------
// Mlp
// ---------------------------------------------------------------------------

Mlp::Mlp(const std::vector<std::int64_t>& layer_sizes, std::mt19937_64& rng, double init_scale) {
  for (auto s : layer_sizes) sizes_.push_back(static_cast<std::size_t>(s));
  offsets_.push_back(0);
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l)
    offsets_.push_back(offsets_.back() + sizes_[l + 1] * sizes_[l] + sizes_[l + 1]);
  params_.assign(offsets_.back(), 0.0);
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const double scale = init_scale / std::sqrt(static_cast<double>(sizes_[l]));
    double* w = params_.data() + offsets_[l];
    for (std::size_t i = 0; i < sizes_[l + 1] * sizes_[l]; ++i) w[i] = scale * (2.0 * unit_uniform(rng) - 1.0);
  }
}

namespace {

// Forward pass for one sample; acts[l] holds layer l's activations.
void forward(const std::vector<std::size_t>& sizes, const std::vector<std::size_t>& offsets, const double* params,
             const double* x, std::vector<std::vector<double>>& acts) {
  acts.resize(sizes.size());
  acts[0].assign(x, x + sizes[0]);
  const std::size_t last = sizes.size() - 2;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const std::size_t in = sizes[l], out = sizes[l + 1];
    const double* w = params + offsets[l];
    const double* b = w + out * in;
    auto& next = acts[l + 1];
    next.resize(out);
    for (std::size_t o = 0; o < out; ++o) {
      double z = b[o];
      for (std::size_t i = 0; i < in; ++i) z += w[o * in + i] * acts[l][i];
      next[o] = l == last ? z : std::tanh(z);
    }
  }
}

}  // namespace

std::vector<double> Mlp::predict(const std::vector<double>& x, std::size_t n) const {
  std::vector<double> out;
  out.reserve(n * outputs());
  std::vector<std::vector<double>> acts;
  for (std::size_t s = 0; s < n; ++s) {
    forward(sizes_, offsets_, params_.data(), x.data() + s * inputs(), acts);
    out.insert(out.end(), acts.back().begin(), acts.back().end());
  }
  return out;
}

double Mlp::loss(const std::vector<double>& x, const std::vector<double>& y, std::size_t n) const {
  auto pred = predict(x, n);
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - y[i];
    sum += d * d;
  }
  return sum / static_cast<double>(pred.size());
}

double Mlp::loss_and_gradient(const std::vector<double>& x, const std::vector<double>& y, std::size_t n,
                              std::vector<double>& grad, std::vector<double>* predictions) const {
  grad.assign(params_.size(), 0.0);
  if (predictions) predictions->clear();
  const std::size_t L = layers();
  const double norm = 2.0 / static_cast<double>(n * outputs());
  std::vector<std::vector<double>> acts;
  std::vector<double> delta, prev;
  double sum = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    forward(sizes_, offsets_, params_.data(), x.data() + s * inputs(), acts);
    const double* target = y.data() + s * outputs();
    delta.resize(outputs());
    for (std::size_t o = 0; o < outputs(); ++o) {
      const double d = acts[L][o] - target[o];
      sum += d * d;
      delta[o] = norm * d;
      if (predictions) predictions->push_back(acts[L][o]);
    }
    for (std::size_t l = L; l-- > 0;) {
      const std::size_t in = sizes_[l], out = sizes_[l + 1];
      const double* w = params_.data() + offsets_[l];
      double* gw = grad.data() + offsets_[l];
      double* gb = gw + out * in;
      for (std::size_t o = 0; o < out; ++o) {
        gb[o] += delta[o];
        for (std::size_t i = 0; i < in; ++i) gw[o * in + i] += delta[o] * acts[l][i];
      }
      if (l == 0) break;
      prev.assign(in, 0.0);
      for (std::size_t o = 0; o < out; ++o)
        for (std::size_t i = 0; i < in; ++i) prev[i] += w[o * in + i] * delta[o];
      for (std::size_t i = 0; i < in; ++i) prev[i] *= 1.0 - acts[l][i] * acts[l][i];
      delta.swap(prev);
    }
  }
  return sum / static_cast<double>(n * outputs());
}

Dataset make_dataset(std::size_t samples, std::size_t inputs, std::size_t outputs, std::mt19937_64& rng,
                     double target_scale, double noise) {
  Dataset d;
  d.inputs = inputs;
  d.outputs = outputs;
  d.x.resize(samples * inputs);
  d.y.resize(samples * outputs);
  for (std::size_t s = 0; s < samples; ++s) {
    double* x = d.x.data() + s * inputs;
    for (std::size_t i = 0; i < inputs; ++i) x[i] = 2.0 * unit_uniform(rng) - 1.0;
    for (std::size_t k = 0; k < outputs; ++k) {
      double z = 0.0;
      for (std::size_t i = 0; i < inputs; ++i) z += x[i] * 1.5 * std::cos(1.0 + static_cast<double>(i + 2 * k));
      const double eps = noise * (2.0 * unit_uniform(rng) - 1.0);
      d.y[s * outputs + k] = target_scale * std::sin(z) + eps;
    }
  }
  return d;
}

Value RunSummary::to_value() const {
  List epochs;
  for (double l : epoch_losses) epochs.emplace_back(l);
  return Value(Record{{"epochs_completed", Value(epochs_completed)},
                      {"steps", Value(steps)},
                      {"stopped_early", Value(stopped_early)},
                      {"final_loss", batch_losses.empty() ? Value() : Value(batch_losses.back())},
                      {"epoch_losses", Value(std::move(epochs))}});
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

namespace {

Value float_list(const std::vector<double>& v) {
  List out;
  out.reserve(v.size());
  for (double d : v) out.emplace_back(d);
  return Value(std::move(out));
}

TrainerConfig checked(TrainerConfig c) {
  c.validate();
  return c;
}

}  // namespace

Trainer::Trainer(TrainerConfig config, Agent* agent)
    : config_(checked(std::move(config))),
      agent_(agent),
      rng_(config_.seed),
      model_(config_.layer_sizes, rng_, config_.init_scale),
      data_(make_dataset(static_cast<std::size_t>(config_.batches_per_epoch * config_.batch_size), model_.inputs(),
                         model_.outputs(), rng_, config_.target_scale, config_.noise)),
      lr_(config_.learning_rate),
      stop_(config_.stop_requested) {
  if (agent_) register_observables();
}

void Trainer::register_observables() {
  Agent& a = *agent_;
  a.register_observable("epoch", [this] { return Value(metrics_.epoch); });
  a.register_observable("batch", [this] { return Value(metrics_.batch); });
  a.register_observable("step", [this] { return Value(step_); });
  a.register_observable("loss", [this] { return Value(metrics_.loss); });
  a.register_observable("duration", [this] { return Value(metrics_.duration); });
  a.register_observable("grad_abs_mean", [this] { return float_list(layer_abs_means(grad_)); });
  a.register_observable("weight_abs_mean", [this] { return float_list(layer_abs_means(model_.params())); });
  a.register_observable("sample_pred", [this] { return sample_prediction(); });
  a.register_observable("epoch_loss", [this] { return Value(epoch_loss_); });

  auto get_lr = [this] { return Value(lr_); };
  auto set_lr = [this](const Value& v) {
    if (!v.is_numeric()) throw std::invalid_argument("lr must be numeric");
    const double d = v.to_double();
    if (!(d > 0.0) || !std::isfinite(d)) throw std::invalid_argument("lr must be positive");
    lr_ = d;
  };
  a.register_observable("lr", get_lr, set_lr);
  a.register_observable("learning_rate", get_lr, set_lr);
  a.register_observable(
      "stop_requested", [this] { return Value(stop_); },
      [this](const Value& v) {
        if (!v.is_bool()) throw std::invalid_argument("stop_requested must be a bool");
        stop_ = v.as_bool();
      });
  a.declare_event("batch");
  a.declare_event("epoch");
}

std::vector<double> Trainer::layer_abs_means(const std::vector<double>& v) const {
  std::vector<double> out;
  for (std::size_t l = 0; l < model_.layers(); ++l) {
    const std::size_t off = model_.layer_offset(l), n = model_.layer_size(l);
    if (v.size() < off + n) {
      out.push_back(0.0);
      continue;
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += std::abs(v[off + i]);
    out.push_back(sum / static_cast<double>(n));
  }
  return out;
}

Value Trainer::sample_prediction() const {
  if (batch_pred_.empty()) return Value();
  const std::size_t bs = static_cast<std::size_t>(config_.batch_size);
  const std::size_t pick = static_cast<std::size_t>((static_cast<std::uint64_t>(step_) * 2654435761u) % bs);
  const std::size_t sample = batch_offset_ + pick;
  const double* x = data_.x.data() + sample * data_.inputs;
  return Value(Record{{"input", float_list(std::vector<double>(x, x + data_.inputs))},
                      {"predicted", Value(batch_pred_[pick * data_.outputs])},
                      {"target", Value(data_.y[sample * data_.outputs])}});
}

RunSummary Trainer::run() {
  RunSummary summary;
  const std::size_t bs = static_cast<std::size_t>(config_.batch_size);
  std::vector<double> xb, yb;
  for (std::int64_t e = 0; e < config_.epochs; ++e) {
    double epoch_sum = 0.0;
    std::int64_t done = 0;
    for (std::int64_t b = 0; b < config_.batches_per_epoch; ++b) {
      if (stop_) {
        summary.stopped_early = true;
        break;
      }
      const auto t0 = std::chrono::steady_clock::now();
      batch_offset_ = static_cast<std::size_t>(b) * bs;
      xb.assign(data_.x.begin() + batch_offset_ * data_.inputs, data_.x.begin() + (batch_offset_ + bs) * data_.inputs);
      yb.assign(data_.y.begin() + batch_offset_ * data_.outputs,
                data_.y.begin() + (batch_offset_ + bs) * data_.outputs);
      const double loss = model_.loss_and_gradient(xb, yb, bs, grad_, &batch_pred_);
      auto& p = model_.params();
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr_ * grad_[i];
      const auto t1 = std::chrono::steady_clock::now();

      metrics_.epoch = e;
      metrics_.batch = b;
      metrics_.loss = loss;
      metrics_.duration = std::chrono::duration<double>(t1 - t0).count();
      ++step_;
      epoch_sum += loss;
      ++done;
      summary.batch_losses.push_back(loss);

      if (agent_) agent_->notify("batch", b + 1 == config_.batches_per_epoch);
      if (on_batch) on_batch(e, b);
      if (config_.throttle.count() > 0) std::this_thread::sleep_for(config_.throttle);
    }
    if (done > 0) {
      epoch_loss_ = epoch_sum / static_cast<double>(done);
      summary.epoch_losses.push_back(epoch_loss_);
    }
    if (done == config_.batches_per_epoch) {
      ++summary.epochs_completed;
      if (agent_) agent_->notify("epoch", true);
    }
    if (summary.stopped_early) break;
  }
  summary.steps = step_;
  return summary;
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

GradientReport gradient_check_report(const TrainerConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  Mlp model(config.layer_sizes, rng, config.init_scale);
  if (model.param_count() > kGradientCheckMaxParams)
    throw ConfigError("gradient check needs at most " + std::to_string(kGradientCheckMaxParams) + " parameters, got " +
                      std::to_string(model.param_count()));
  const auto n = static_cast<std::size_t>(config.batch_size);
  Dataset d = make_dataset(n, model.inputs(), model.outputs(), rng, config.target_scale, config.noise);

  GradientReport r;
  model.loss_and_gradient(d.x, d.y, n, r.analytic);
  auto& p = model.params();
  r.numeric.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + kGradientCheckStep;
    const double up = model.loss(d.x, d.y, n);
    p[i] = orig - kGradientCheckStep;
    const double down = model.loss(d.x, d.y, n);
    p[i] = orig;
    r.numeric[i] = (up - down) / (2.0 * kGradientCheckStep);
    const double a = r.analytic[i], num = r.numeric[i];
    const double denom = std::max({std::abs(a), std::abs(num), 1e-6});
    r.max_relative_error = std::max(r.max_relative_error, std::abs(a - num) / denom);
  }
  return r;
}

double gradient_check(const TrainerConfig& config) { return gradient_check_report(config).max_relative_error; }

}  // namespace livewatch::trainer
