#pragma once

#include <numbers>

#include "hgrn/config.hpp"
#include "hgrn/model.hpp"

namespace hgrn {

/// Linear warmup to peak_lr over warmup_steps, then inverse-sqrt or cosine decay.
inline double lr_at(std::size_t step, const TrainConfig& cfg) {
  const double peak = cfg.peak_lr;
  const double w = double(cfg.warmup_steps);
  if (step < cfg.warmup_steps) return peak * double(step) / w;
  if (cfg.schedule == Schedule::inverse_sqrt) return step == 0 ? peak : peak * std::sqrt(w / double(step));
  const double span = double(cfg.total_steps) - w;
  if (span <= 0) return step >= cfg.total_steps ? 0.0 : peak;
  const double progress = std::min(1.0, (double(step) - w) / span);
  return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Adam with bias correction and decoupled weight decay. Decay applies only to
/// parameters flagged for it; with weight_decay == 0 this is plain Adam.
template <typename T>
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}

  /// `step` counts from 1 for the first update.
  void step(std::vector<NamedParam<T>>& params, double lr, std::size_t step) {
    if (m_.empty()) {
      for (auto& p : params) {
        m_.emplace_back(p.tensor.size(), 0.0);
        v_.emplace_back(p.tensor.size(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw DimensionError("AdamW: parameter list changed between steps");
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, double(step)), c2 = 1.0 - std::pow(b2, double(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.tensor.requires_grad()) continue;
      auto w = p.tensor.values();
      if (m_[i].size() != w.size()) throw DimensionError("AdamW: shape mismatch for " + p.name);
      if (!p.tensor.has_grad()) p.tensor.zero_grad();
      auto g = p.tensor.grad();
      const double wd = p.decay ? cfg_.weight_decay : 0.0;
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = double(g[k]);
        m_[i][k] = b1 * m_[i][k] + (1.0 - b1) * gk;
        v_[i][k] = b2 * v_[i][k] + (1.0 - b2) * gk * gk;
        const double mhat = m_[i][k] / c1, vhat = v_[i][k] / c2;
        double x = double(w[k]);
        x -= lr * wd * x;
        x -= lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
        w[k] = T(x);
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
};

/// Scales all gradients so their global L2 norm is at most max_norm. Returns the
/// norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<NamedParam<T>>& params, double max_norm) {
  double sq = 0;
  for (auto& p : params)
    if (p.tensor.has_grad())
      for (T g : p.tensor.grad()) sq += double(g) * double(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (auto& p : params)
      if (p.tensor.has_grad())
        for (T& g : p.tensor.grad()) g = T(double(g) * s);
  }
  return norm;
}

}  // namespace hgrn
