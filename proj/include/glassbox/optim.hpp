#pragma once

#include "glassbox/core.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace glassbox {

// Cosine annealing from `base_lr` at step 0 to `min_lr` at the last step.
inline double cosine_lr(double base_lr, double min_lr, int step, int total_steps) {
  if (total_steps <= 1) return base_lr;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

// Scales gradients in place so their global L2 norm is at most `max_norm`.
// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<Mat<T>*>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto* g : grads) sq += static_cast<double>(g->squaredNorm());
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto* g : grads) *g *= s;
  }
  return norm;
}

class Adam {
 public:
  Adam(const std::vector<MatF*>& params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto* p : params) {
      m_.push_back(MatF::Zero(p->rows(), p->cols()));
      v_.push_back(MatF::Zero(p->rows(), p->cols()));
    }
  }

  void step(const std::vector<MatF*>& params, const std::vector<MatF*>& grads, double lr) {
    require(params.size() == m_.size() && grads.size() == m_.size(), errc::kInvalidArgument,
            "adam: parameter list changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    const auto b1 = static_cast<float>(beta1_);
    const auto b2 = static_cast<float>(beta2_);
    const auto step_size = static_cast<float>(lr / bc1);
    const auto inv_bc2 = static_cast<float>(1.0 / bc2);
    const auto eps = static_cast<float>(eps_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto g = grads[i]->array();
      m_[i].array() = b1 * m_[i].array() + (1.0f - b1) * g;
      v_[i].array() = b2 * v_[i].array() + (1.0f - b2) * g.square();
      params[i]->array() -= step_size * m_[i].array() / ((v_[i].array() * inv_bc2).sqrt() + eps);
    }
  }

 private:
  double beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<MatF> m_, v_;
};

}  // namespace glassbox
