#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "wmlab/error.hpp"
#include "wmlab/tensor.hpp"

namespace wmlab {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
  double grad_clip = 0.0;     // global norm; 0 disables
};

/// AdamW with decoupled weight decay, bias-corrected moments and global
/// gradient-norm clipping applied across all parameters at once.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    for (const Tensor& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

  /// Pre-clip global gradient norm of the last step(); for diagnostics.
  double last_grad_norm() const { return last_grad_norm_; }
  long step_count() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  void step() {
    double sq = 0.0;
    for (const Tensor& p : params_)
      for (double g : p.grad()) sq += g * g;
    double norm = std::sqrt(sq);
    if (!std::isfinite(norm))
      throw DivergenceError("non-finite gradient norm at optimizer step " +
                            std::to_string(step_ + 1));
    last_grad_norm_ = norm;
    double scale = 1.0;
    if (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) scale = cfg_.grad_clip / norm;

    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t k = 0; k < params_.size(); ++k) {
      Tensor& p = params_[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (size_t i = 0; i < p.size(); ++i) {
        double g = p.grad()[i] * scale;
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        double mh = m[i] / bc1;
        double vh = v[i] / bc2;
        p.values()[i] -= cfg_.lr * (mh / (std::sqrt(vh) + cfg_.eps) +
                                    cfg_.weight_decay * p.values()[i]);
      }
    }
  }

  // Checkpointable optimizer state.
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void restore(long step, std::vector<std::vector<double>> m,
               std::vector<std::vector<double>> v) {
    if (m.size() != params_.size() || v.size() != params_.size())
      throw DimensionError("optimizer state does not match parameter list");
    for (size_t k = 0; k < params_.size(); ++k)
      if (m[k].size() != params_[k].size() || v[k].size() != params_[k].size())
        throw DimensionError("optimizer moment shape mismatch");
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  std::vector<Tensor> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long step_ = 0;
  double last_grad_norm_ = 0.0;
};

}  // namespace wmlab
