#include "mem4d/loss.hpp"

#include <cmath>

#include <spdlog/spdlog.h>

namespace mem4d::loss {

Real scale_factor(const std::vector<GroundTruthFrame>& frames) {
  Real total = 0;
  std::size_t count = 0;
  for (const auto& f : frames) {
    const auto x = f.x_global.data();
    const auto m = f.mask.data();
    if (x.size() != 3 * m.size()) throw ShapeError("ground-truth pointmap and mask disagree");
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m[i] == 0) continue;
      total += std::sqrt(x[3 * i] * x[3 * i] + x[3 * i + 1] * x[3 * i + 1] + x[3 * i + 2] * x[3 * i + 2]);
      ++count;
    }
  }
  if (count == 0) throw InputError("scale factor needs at least one valid ground-truth point");
  return std::max(total / static_cast<Real>(count), Real(1e-6));
}

Tensor confidence_regression_loss(const std::vector<PointmapTerm>& terms, Real s, Real alpha, bool strict_sum) {
  if (!(s > 0)) throw ArgumentError("scale factor must be positive");
  Tensor acc;
  Real valid = 0;
  for (const auto& t : terms) {
    if (t.points.shape() != t.target.shape() || t.points.rank() != 3 || t.points.dim(2) != 3) {
      throw ShapeError("pointmap loss: prediction " + shape_str(t.points.shape()) + " vs target " +
                       shape_str(t.target.shape()));
    }
    const Shape pix{t.points.dim(0), t.points.dim(1)};
    if (t.confidence.shape() != pix || t.mask.shape() != pix) throw ShapeError("pointmap loss: confidence/mask shape");
    Tensor err = scale(norm_last(sub(t.points, t.target)), Real(1) / s);
    Tensor per_pixel = sub(mul(t.confidence, err), scale(log(t.confidence), alpha));
    Tensor term = sum(mul(per_pixel, t.mask));
    acc = acc.defined() ? add(acc, term) : term;
    for (Real m : t.mask.data()) valid += m;
  }
  if (!acc.defined()) return Tensor::zeros({1});
  if (strict_sum || valid == 0) return acc;
  return scale(acc, Real(1) / valid);
}

Tensor quat_conjugate(const Tensor& q) { return mul(q, Tensor::from({4}, {1, -1, -1, -1})); }

Tensor quat_rotate(const Tensor& q, const Tensor& v) {
  Tensor pure = concat({Tensor::zeros({1}), v}, 0);
  return slice(quat_mul(quat_mul(q, pure), quat_conjugate(q)), 0, 1, 4);
}

Tensor canonicalize_hemisphere(const Tensor& q, const Tensor& reference) {
  Real dot = 0;
  for (std::size_t i = 0; i < 4; ++i) dot += q[i] * reference[i];
  return dot < 0 ? neg(q) : q;
}

std::pair<Tensor, Tensor> relative_pose(const Pose& current, const Pose& previous) {
  Tensor dq = quat_mul(current.quaternion, quat_conjugate(previous.quaternion));
  Tensor dtau = sub(current.translation, quat_rotate(dq, previous.translation));
  return {dq, dtau};
}

Tensor absolute_pose_loss(const std::vector<Pose>& predicted, const std::vector<Pose>& truth, Real s, Real beta,
                          bool strict_sum) {
  if (predicted.size() != truth.size()) throw ShapeError("pose loss: frame counts differ");
  if (predicted.empty()) return Tensor::zeros({1});
  Tensor acc;
  for (std::size_t t = 0; t < predicted.size(); ++t) {
    const auto& p = predicted[t];
    const auto& g = truth[t];
    Tensor q = canonicalize_hemisphere(p.quaternion, g.quaternion);
    Tensor term = add(norm_last(sub(q, g.quaternion)),
                      scale(norm_last(sub(p.translation, g.translation)), Real(1) / s));
    if (beta != 0) term = add(term, scale(norm_last(reshape(sub(p.intrinsics, g.intrinsics), {9})), beta));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return strict_sum ? acc : scale(acc, Real(1) / static_cast<Real>(predicted.size()));
}

Tensor relative_pose_loss(const std::vector<Pose>& predicted, const std::vector<Pose>& truth, Real s,
                          bool strict_sum) {
  if (predicted.size() != truth.size()) throw ShapeError("relative pose loss: frame counts differ");
  if (predicted.size() < 2) {
    spdlog::warn("relative pose loss needs at least two frames; returning 0");
    return Tensor::zeros({1});
  }
  Tensor acc;
  for (std::size_t t = 1; t < predicted.size(); ++t) {
    auto [dq_hat, dtau_hat] = relative_pose(predicted[t], predicted[t - 1]);
    auto [dq, dtau] = relative_pose(truth[t], truth[t - 1]);
    Tensor q = canonicalize_hemisphere(dq_hat, dq);
    Tensor term = add(norm_last(sub(q, dq)), scale(norm_last(sub(dtau_hat, dtau)), Real(1) / s));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return strict_sum ? acc : scale(acc, Real(1) / static_cast<Real>(predicted.size() - 1));
}

Tensor total_loss(const Tensor& conf, const Tensor& abspose, const Tensor& relpose, const std::array<Real, 3>& lambda) {
  for (Real l : lambda)
    if (l < 0) throw ConfigError("loss weights must be non-negative");
  return add(add(scale(conf, lambda[0]), scale(abspose, lambda[1])), scale(relpose, lambda[2]));
}

std::vector<Pose> poses_of(const std::vector<decoder::FramePrediction>& predicted) {
  std::vector<Pose> out;
  for (const auto& p : predicted) out.push_back({p.quaternion, p.translation, p.intrinsics});
  return out;
}

std::vector<Pose> poses_of(const std::vector<GroundTruthFrame>& truth) {
  std::vector<Pose> out;
  for (const auto& g : truth) out.push_back({g.quaternion, g.translation, g.intrinsics});
  return out;
}

LossParts sequence_loss(const std::vector<decoder::FramePrediction>& predicted,
                        const std::vector<GroundTruthFrame>& truth, const LossConfig& config, bool use_relpose) {
  if (predicted.size() != truth.size()) throw ShapeError("sequence loss: frame counts differ");
  const Real s = scale_factor(truth);
  std::vector<PointmapTerm> terms;
  for (std::size_t t = 0; t < predicted.size(); ++t) {
    terms.push_back({predicted[t].x_global, predicted[t].c_global, truth[t].x_global, truth[t].mask});
    terms.push_back({predicted[t].x_self, predicted[t].c_self, truth[t].x_self, truth[t].mask});
  }
  LossParts parts;
  parts.conf = confidence_regression_loss(terms, s, config.alpha, config.strict_sum);
  const auto p = poses_of(predicted);
  const auto g = poses_of(truth);
  parts.abspose = absolute_pose_loss(p, g, s, config.beta, config.strict_sum);
  parts.relpose = use_relpose && predicted.size() >= 2 ? relative_pose_loss(p, g, s, config.strict_sum)
                                                       : Tensor::zeros({1});
  parts.total = total_loss(parts.conf, parts.abspose, parts.relpose,
                           {config.lambda[0], config.lambda[1], use_relpose ? config.lambda[2] : Real(0)});
  return parts;
}

}  // namespace mem4d::loss
