#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <span>
#include <string>
#include <vector>

#include "hawkes/autodiff.hpp"
#include "hawkes/eventseq.hpp"
#include "hawkes/rng.hpp"

namespace hawkes {

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t batch_size = 8;
  std::size_t max_epochs = 200;
  std::size_t patience = 15;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 10.0;  // global-norm threshold; <= 0 disables
  bool verbose = false;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ValidationError("TrainConfig: learning_rate < 0");
    if (batch_size < 1) throw ValidationError("TrainConfig: batch_size must be >= 1");
    if (patience < 1) throw ValidationError("TrainConfig: patience must be >= 1");
    if (max_epochs < 1) throw ValidationError("TrainConfig: max_epochs must be >= 1");
  }
};

struct TrainReport {
  std::vector<double> train_loss;  // per epoch, mean per sequence
  std::vector<double> val_loss;
  std::size_t stop_epoch = 0;  // number of epochs actually run
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  std::size_t smoothed_violations = 0;
  double wall_seconds = 0.0;   // reporting only; excluded from serialized output
  std::string checkpoint_path;
};

// Adam over the flat parameter view, with optional global-norm clipping.
class Adam {
 public:
  explicit Adam(std::size_t n) : m_(n, 0.0), v_(n, 0.0) {}

  void step(ad::ParamStore& params, const ad::ParamStore& grads, const TrainConfig& cfg) {
    ++t_;
    double scale = 1.0;
    if (cfg.grad_clip > 0.0) {
      double sq = 0.0;
      for (std::size_t e = 0; e < grads.count(); ++e)
        for (double g : grads.at(e).values) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > cfg.grad_clip) scale = cfg.grad_clip / norm;
    }
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
    std::size_t off = 0;
    for (std::size_t e = 0; e < params.count(); ++e) {
      auto& pv = params.at(e).values;
      const auto& gv = grads.at(e).values;
      for (std::size_t i = 0; i < pv.size(); ++i) {
        const double g = gv[i] * scale;
        m_[off] = cfg.beta1 * m_[off] + (1.0 - cfg.beta1) * g;
        v_[off] = cfg.beta2 * v_[off] + (1.0 - cfg.beta2) * g * g;
        const double mhat = m_[off] / bc1;
        const double vhat = v_[off] / bc2;
        pv[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        ++off;
      }
    }
  }

 private:
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

// Builds the (scalar) loss for a set of sequence indices on the given tape.
// Batch-level regularizers live inside the builder, so validation uses the
// same objective over the whole validation split.
using BatchLossBuilder =
    std::function<ad::Value(ad::Tape&, std::span<const std::size_t>)>;

namespace detail {

inline std::size_t count_smoothed_violations(const std::vector<double>& losses,
                                             std::size_t window = 5,
                                             double rel_tol = 1e-3) {
  if (losses.size() <= window) return 0;
  auto smooth = [&](std::size_t end) {  // mean of losses[end-window, end)
    double s = 0.0;
    for (std::size_t i = end - window; i < end; ++i) s += losses[i];
    return s / static_cast<double>(window);
  };
  std::size_t violations = 0;
  for (std::size_t end = window + 1; end <= losses.size(); ++end) {
    const double prev = smooth(end - 1);
    const double cur = smooth(end);
    if (cur > prev + rel_tol * std::abs(prev)) ++violations;
  }
  return violations;
}

}  // namespace detail

// Mini-batch Adam with early stopping on the validation objective. The best
// validation checkpoint is restored into `params` before returning. Fully
// deterministic for a fixed seed.
inline TrainReport train(ad::ParamStore& params, const Dataset& ds, const Split& split,
                         const TrainConfig& cfg, const BatchLossBuilder& build_loss) {
  cfg.validate();
  if (split.train.empty()) throw ValidationError("train: empty training split");

  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(cfg.seed);
  Adam adam(params.total_size());
  ad::Tape tape(params);

  std::vector<std::size_t> order = split.train;
  TrainReport report;
  ad::ParamStore best_params = params;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t bad_epochs = 0;
  double min_train = std::numeric_limits<double>::infinity();
  std::size_t rising_epochs = 0;

  auto eval_split = [&](const std::vector<std::size_t>& idx) {
    tape.reset();
    ad::Value loss = build_loss(tape, idx);
    return tape.scalar(loss) / static_cast<double>(idx.size());
  };

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(start + cfg.batch_size, order.size());
      std::span<const std::size_t> batch(order.data() + start, end - start);
      tape.reset();
      ad::Value loss = build_loss(tape, batch);
      const double value = tape.scalar(loss);
      if (!std::isfinite(value)) {
        std::string ids;
        for (std::size_t i : batch) ids += ds[i].seq_id() + " ";
        throw TrainingError("train: non-finite loss at epoch " + std::to_string(epoch) +
                            ", batch sequences: " + ids);
      }
      epoch_loss += value;
      if (cfg.learning_rate > 0.0) {
        ad::ParamStore grads = params.zeros_like();
        tape.backward(loss, grads);
        adam.step(params, grads, cfg);
        if (!params.all_finite())
          throw TrainingError("train: parameters became non-finite at epoch " +
                              std::to_string(epoch));
      }
    }
    epoch_loss /= static_cast<double>(order.size());
    report.train_loss.push_back(epoch_loss);

    const double val =
        split.validation.empty() ? epoch_loss : eval_split(split.validation);
    report.val_loss.push_back(val);
    if (cfg.verbose)
      std::cout << "epoch " << epoch << " train " << epoch_loss << " val " << val
                << "\n";

    if (val < best_val) {
      best_val = val;
      best_epoch = epoch;
      best_params = params;
      bad_epochs = 0;
    } else {
      ++bad_epochs;
    }

    // Divergence watchdog: sustained blow-up well past the best train loss.
    min_train = std::min(min_train, epoch_loss);
    if (epoch_loss > min_train + std::max(10.0, std::abs(min_train)))
      ++rising_epochs;
    else
      rising_epochs = 0;
    if (rising_epochs >= 30)
      throw TrainingError("train: loss diverged (epoch " + std::to_string(epoch) +
                          ", train " + std::to_string(epoch_loss) + ", best " +
                          std::to_string(min_train) + ")");

    if (bad_epochs >= cfg.patience) break;
  }

  params = best_params;
  report.stop_epoch = report.train_loss.size();
  report.best_epoch = best_epoch;
  report.best_val_loss = best_val;
  report.smoothed_violations = detail::count_smoothed_violations(report.train_loss);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace hawkes
