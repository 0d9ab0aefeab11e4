#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "cot/models.hpp"

namespace cot {

/// lr * 0.5 * (1 + cos(pi * epoch / total)).
inline double cosine_lr(double base_lr, std::size_t epoch, std::size_t total) {
  require(total > 0, "cosine schedule needs at least one epoch");
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(total)));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-5;  // L2 term added to the gradient
};

/// Adam over a fixed, ordered parameter list. Moments are kept in double.
template <class T>
class Adam {
 public:
  Adam(NamedTensors<T> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& [name, p] : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k].second;
      if (!p.has_grad()) continue;
      const auto& g = p.impl()->grad;
      auto w = p.mutable_data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]) + cfg_.weight_decay * static_cast<double>(w[i]);
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double update = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - update);
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }
  const NamedTensors<T>& params() const noexcept { return params_; }

 private:
  NamedTensors<T> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace cot
