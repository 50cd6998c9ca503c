#include "mem4d/optim.hpp"

#include <cmath>
#include <numbers>

namespace mem4d::nn {

Real scheduled_learning_rate(const AdamWConfig& config, std::size_t step) {
  Real warm = Real(1);
  if (config.warmup_steps > 0) {
    warm = std::min(Real(1), static_cast<Real>(step) / static_cast<Real>(config.warmup_steps));
  }
  const Real progress =
      std::min(Real(1), static_cast<Real>(step) / static_cast<Real>(std::max<std::size_t>(config.total_steps, 1)));
  const Real cosine = Real(0.5) * (Real(1) + std::cos(std::numbers::pi_v<Real> * progress));
  return std::max(Real(0), config.learning_rate * warm * cosine);
}

AdamW::AdamW(const ParamStore& params, AdamWConfig config) : config_(config) {
  for (const auto& [name, t] : params.entries()) {
    m_.emplace_back(t.numel(), Real(0));
    v_.emplace_back(t.numel(), Real(0));
  }
}

bool AdamW::step(ParamStore& params) {
  const auto& entries = params.entries();
  if (entries.size() != m_.size()) throw ConfigError("optimizer state does not match the parameter registry");
  for (const auto& [name, t] : entries) {
    if (!t.has_grad()) continue;
    for (Real g : t.grad()) {
      if (!std::isfinite(g)) return false;
    }
  }
  const Real lr = current_learning_rate();
  const Real t1 = static_cast<Real>(step_ + 1);
  const Real bc1 = Real(1) - std::pow(config_.beta1, t1);
  const Real bc2 = Real(1) - std::pow(config_.beta2, t1);
  for (std::size_t k = 0; k < entries.size(); ++k) {
    Tensor p = entries[k].second;
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    const bool decay = p.rank() >= 2;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (Real(1) - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (Real(1) - config_.beta2) * g[i] * g[i];
      const Real mhat = m[i] / bc1;
      const Real vhat = v[i] / bc2;
      if (decay) w[i] -= lr * config_.weight_decay * w[i];
      w[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
  ++step_;
  return true;
}

void AdamW::restore(std::size_t step, std::vector<std::vector<Real>> m, std::vector<std::vector<Real>> v) {
  if (m.size() != m_.size() || v.size() != v_.size()) throw ConfigError("optimizer state size mismatch");
  for (std::size_t k = 0; k < m.size(); ++k) {
    if (m[k].size() != m_[k].size() || v[k].size() != v_[k].size()) throw ConfigError("optimizer moment size mismatch");
  }
  step_ = step;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace mem4d::nn
