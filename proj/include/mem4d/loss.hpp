#pragma once

#include <array>
#include <vector>

#include "mem4d/decoder.hpp"

namespace mem4d::loss {

struct LossConfig {
  Real alpha = Real(0.2);  // confidence regularizer
  Real beta = Real(0.1);   // intrinsics weight inside the absolute pose term
  std::array<Real, 3> lambda{1, Real(0.1), Real(0.1)};
  bool strict_sum = false;  // sum instead of mean over pixels / frames
};

/// Ground truth for one frame. Pointmaps are H x W x 3, mask H x W with 1 for
/// valid pixels and 0 otherwise. Poses are world-to-camera.
struct GroundTruthFrame {
  Tensor x_global, x_self;
  Tensor mask;
  Tensor intrinsics;   // {3, 3}
  Tensor quaternion;   // {4}, (w, x, y, z)
  Tensor translation;  // {3}
};

/// Mean norm of valid global points over the sequence, at least 1e-6.
Real scale_factor(const std::vector<GroundTruthFrame>& frames);

struct PointmapTerm {
  Tensor points, confidence, target, mask;
};

/// sum c * |x_hat - x| / s - alpha * log c over valid pixels of all terms;
/// divided by the valid pixel count unless strict_sum.
Tensor confidence_regression_loss(const std::vector<PointmapTerm>& terms, Real s, Real alpha, bool strict_sum = false);

struct Pose {
  Tensor quaternion;   // {4}
  Tensor translation;  // {3}
  Tensor intrinsics;   // {3, 3}; unused by the relative term
};

/// q or -q, whichever lies in the hemisphere of `reference`.
Tensor canonicalize_hemisphere(const Tensor& q, const Tensor& reference);

Tensor quat_conjugate(const Tensor& q);
Tensor quat_rotate(const Tensor& q, const Tensor& v);

/// T_cur * T_prev^{-1} as (dq, dtau).
std::pair<Tensor, Tensor> relative_pose(const Pose& current, const Pose& previous);

Tensor absolute_pose_loss(const std::vector<Pose>& predicted, const std::vector<Pose>& truth, Real s, Real beta,
                          bool strict_sum = false);

/// Zero (with a warning) for fewer than two frames.
Tensor relative_pose_loss(const std::vector<Pose>& predicted, const std::vector<Pose>& truth, Real s,
                          bool strict_sum = false);

Tensor total_loss(const Tensor& conf, const Tensor& abspose, const Tensor& relpose, const std::array<Real, 3>& lambda);

struct LossParts {
  Tensor conf, abspose, relpose, total;
};

/// Full objective over a predicted sequence. Both pointmaps of every frame
/// enter the confidence term.
LossParts sequence_loss(const std::vector<decoder::FramePrediction>& predicted,
                        const std::vector<GroundTruthFrame>& truth, const LossConfig& config, bool use_relpose = true);

std::vector<Pose> poses_of(const std::vector<decoder::FramePrediction>& predicted);
std::vector<Pose> poses_of(const std::vector<GroundTruthFrame>& truth);

}  // namespace mem4d::loss
