#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "lancer/tensor.hpp"

namespace lancer {

/// Adam with a learning rate that decays linearly to zero over
/// `total_steps`, no warmup.
template <class T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, double lr, std::size_t total_steps, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), total_(total_steps), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  double current_lr() const {
    if (total_ == 0) return lr_;
    double frac = 1.0 - static_cast<double>(step_) / static_cast<double>(total_);
    return lr_ * (frac > 0.0 ? frac : 0.0);
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    const double lr = current_lr();
    ++step_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      auto w = p.mutable_values();
      auto g = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        double gj = static_cast<double>(g[j]);
        m[j] = b1_ * m[j] + (1.0 - b1_) * gj;
        v[j] = b2_ * v[j] + (1.0 - b2_) * gj * gj;
        double update = lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
        if (lr != 0.0) w[j] = static_cast<T>(static_cast<double>(w[j]) - update);
      }
    }
  }

  std::size_t steps_taken() const { return step_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_;
  std::size_t total_;
  double b1_, b2_, eps_;
  std::size_t step_ = 0;
};

}  // namespace lancer
