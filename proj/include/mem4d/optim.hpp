#pragma once

#include <cstddef>
#include <vector>

#include "mem4d/nn.hpp"

namespace mem4d::nn {

struct AdamWConfig {
  Real learning_rate = Real(1e-3);
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.95);
  Real eps = Real(1e-8);
  Real weight_decay = Real(0.05);
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
};

/// Linear warmup then cosine decay to zero at total_steps.
Real scheduled_learning_rate(const AdamWConfig& config, std::size_t step);

/// AdamW with bias-corrected moments and decoupled weight decay. Decay is
/// applied to matrices only; biases and norm parameters are exempt.
class AdamW {
 public:
  AdamW(const ParamStore& params, AdamWConfig config);

  /// Applies one update from the gradients currently held by `params`.
  /// Returns false and leaves everything untouched if any gradient is not finite.
  bool step(ParamStore& params);

  Real current_learning_rate() const { return scheduled_learning_rate(config_, step_); }
  std::size_t step_count() const { return step_; }
  const AdamWConfig& config() const { return config_; }

  const std::vector<std::vector<Real>>& first_moments() const { return m_; }
  const std::vector<std::vector<Real>>& second_moments() const { return v_; }
  void restore(std::size_t step, std::vector<std::vector<Real>> m, std::vector<std::vector<Real>> v);

 private:
  AdamWConfig config_;
  std::size_t step_ = 0;
  std::vector<std::vector<Real>> m_;
  std::vector<std::vector<Real>> v_;
};

}  // namespace mem4d::nn
