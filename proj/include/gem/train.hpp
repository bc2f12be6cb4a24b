#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "gem/metrics.hpp"
#include "gem/model.hpp"
#include "gem/rng.hpp"

namespace gem {

// Adaptive-moment optimizer with decoupled weight decay.
class AdamW {
 public:
  AdamW(ParamStore& params, double lr, double weight_decay = 0.0)
      : params_(params), lr_(lr), weight_decay_(weight_decay) {
    for (auto& [name, t] : params_) {
      m_.emplace_back(std::size_t(t.size()), 0.0);
      v_.emplace_back(std::size_t(t.size()), 0.0);
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, double(t_));
    const double bc2 = 1.0 - std::pow(beta2_, double(t_));
    std::size_t pi = 0;
    for (auto& [name, p] : params_) {
      auto vals = p.mutable_values();
      auto g = p.grad();
      if (!g.empty()) {
        for (std::size_t i = 0; i < vals.size(); ++i) {
          m_[pi][i] = beta1_ * m_[pi][i] + (1.0 - beta1_) * g[i];
          v_[pi][i] = beta2_ * v_[pi][i] + (1.0 - beta2_) * g[i] * g[i];
          const double mhat = m_[pi][i] / bc1;
          const double vhat = v_[pi][i] / bc2;
          vals[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * vals[i]);
        }
      }
      ++pi;
    }
  }

  void zero_grad() { params_.zero_grad(); }
  double lr() const { return lr_; }

 private:
  ParamStore& params_;
  double lr_;
  double weight_decay_;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct EpochStats {
  std::vector<double> batch_losses;  // mean total loss per batch, in order
  double loss = 0.0;                 // epoch mean over samples
  double mse = 0.0;
  double ce = 0.0;
};

// One pass over the dataset: seeded shuffle, per-batch gradient accumulation
// in sample order, one optimizer step per batch. Aborts on a non-finite loss
// naming the batch.
inline EpochStats train_epoch(GemModel& model, std::span<const Sample> data, AdamW& opt,
                              Rng& shuffle_rng) {
  if (data.empty()) throw std::invalid_argument("train_epoch: dataset is empty");
  const int batch = model.config().batch;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, shuffle_rng);

  EpochStats stats;
  double sum_loss = 0.0, sum_mse = 0.0, sum_ce = 0.0;
  for (std::size_t start = 0; start < order.size(); start += std::size_t(batch)) {
    const std::size_t end = std::min(order.size(), start + std::size_t(batch));
    const double inv = 1.0 / double(end - start);
    opt.zero_grad();
    double batch_loss = 0.0;
    for (std::size_t i = start; i < end; ++i) {
      const GemModel::Loss loss = model.sample_loss(data[order[i]]);
      Tensor scaled = mul_scalar(loss.total, inv);
      scaled.backward();
      batch_loss += loss.total.item();
      sum_loss += loss.total.item();
      sum_mse += loss.mse.item();
      sum_ce += loss.ce.item();
    }
    batch_loss *= inv;
    if (!std::isfinite(batch_loss))
      throw NumericError("train_epoch: non-finite loss in batch " +
                         std::to_string(start / std::size_t(batch)));
    stats.batch_losses.push_back(batch_loss);
    opt.step();
  }
  const double inv_n = 1.0 / double(data.size());
  stats.loss = sum_loss * inv_n;
  stats.mse = sum_mse * inv_n;
  stats.ce = sum_ce * inv_n;
  return stats;
}

// Full training driver; invokes the callback with validation metrics after
// every epoch.
using EpochCallback = std::function<void(int epoch, const EpochStats&, const MetricsReport&)>;

inline void fit(GemModel& model, std::span<const Sample> train_data,
                std::span<const Sample> val_data, const EpochCallback& on_epoch) {
  const TrainConfig& cfg = model.config();
  AdamW opt(model.params(), cfg.lr, cfg.weight_decay);
  Rng shuffle_rng(mix_seed(cfg.seed, 0x50f1e));
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const EpochStats stats = train_epoch(model, train_data, opt, shuffle_rng);
    const MetricsReport val = evaluate(model, val_data);
    if (on_epoch) on_epoch(epoch, stats, val);
  }
}

}  // namespace gem
