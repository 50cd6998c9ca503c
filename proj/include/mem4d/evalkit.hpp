#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Geometry>
#include <json.hpp>

#include "mem4d/dataset.hpp"

namespace mem4d::eval {

inline constexpr int kReportSchema = 1;

/// Similarity transform p -> scale * rotation * p + translation.
struct Sim3 {
  double scale = 1;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return scale * rotation * p + translation; }
  Sim3 inverse() const;
};

/// World-to-camera pose.
struct Pose {
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Vector3d camera_center() const { return -(rotation.conjugate() * translation); }
};
using Trajectory = std::vector<Pose>;

/// Least-squares similarity mapping `source` onto `target` (Umeyama).
/// Throws ArgumentError for fewer than three pairs or a rank-deficient
/// (collinear or coincident) configuration.
Sim3 umeyama_sim3(const std::vector<Eigen::Vector3d>& source, const std::vector<Eigen::Vector3d>& target);

/// Sum of squared residuals |S(source_i) - target_i|^2.
double alignment_residual(const Sim3& s, const std::vector<Eigen::Vector3d>& source,
                          const std::vector<Eigen::Vector3d>& target);

std::vector<Eigen::Vector3d> camera_centers(const Trajectory& trajectory);

/// Re-expresses a trajectory in the frame that `s` maps its world into.
Trajectory transform_trajectory(const Trajectory& trajectory, const Sim3& s);

/// RMSE of camera centres, after Sim(3) alignment of predicted centres when `align`.
double ate(const Trajectory& predicted, const Trajectory& truth, bool align);

struct RpeResult {
  double translation = 0;  // RMSE, world units
  double rotation = 0;     // RMSE, degrees
};
/// Relative pose error over frame pairs (i, i + delta).
RpeResult rpe(const Trajectory& predicted, const Trajectory& truth, std::size_t delta = 1);

enum class DepthMode { kPerScene, kMetric };
enum class DepthAlignment { kScale, kScaleShift };

struct DepthResult {
  double abs_rel = 0;
  double delta = 0;   // fraction in [0, 1] with max(d/d*, d*/d) < 1.25
  double scale = 1;   // applied to predictions
  double shift = 0;
  std::size_t pixels = 0;
};

/// Predictions are clamped to >= 1e-6 first. Per-scene mode fits one scale
/// (median ratio) or scale+shift (least squares) over `fit_mask`, then scores
/// pixels in `eval_mask`. Ground truth must be positive on both masks.
DepthResult depth_metrics(const std::vector<double>& predicted, const std::vector<double>& truth,
                          const std::vector<std::uint8_t>& fit_mask, const std::vector<std::uint8_t>& eval_mask,
                          DepthMode mode, DepthAlignment alignment = DepthAlignment::kScale);
DepthResult depth_metrics(const std::vector<double>& predicted, const std::vector<double>& truth,
                          const std::vector<std::uint8_t>& mask, DepthMode mode,
                          DepthAlignment alignment = DepthAlignment::kScale);

struct ChamferResult {
  double acc_mean = 0, acc_median = 0;    // predicted -> truth
  double comp_mean = 0, comp_median = 0;  // truth -> predicted
};
/// Brute-force nearest neighbours; both clouds must be non-empty.
ChamferResult chamfer_acc_comp(const std::vector<Eigen::Vector3d>& predicted, const std::vector<Eigen::Vector3d>& truth);

/// Model outputs for one sequence, as streamed.
struct PredictedSequence {
  std::string name;
  std::size_t height = 0, width = 0;
  Trajectory poses;
  std::vector<std::vector<double>> x_global, x_self;  // H x W x 3 per frame
  std::vector<std::vector<double>> confidence;        // H x W per frame (global head)
};

/// predictions.json + x_global.m4db, x_self.m4db, confidence.m4db.
void write_predictions(const std::filesystem::path& dir, const PredictedSequence& p);
PredictedSequence read_predictions(const std::filesystem::path& dir);

/// Ground truth restated as a predicted sequence; evaluating it yields zero errors.
PredictedSequence oracle_predictions(const scene::Sequence& truth);

struct EvalOptions {
  DepthAlignment alignment = DepthAlignment::kScale;
  std::size_t rpe_delta = 1;
  std::size_t chamfer_max_points = 4000;  // uniform stride subsample per cloud
};

struct SequenceMetrics {
  std::string name;
  double ate = 0, rpe_trans = 0, rpe_rot = 0;
  bool trajectory_aligned = true;  // false when Sim(3) was degenerate and a centroid shift was used
  DepthResult per_scene, metric, dynamic_per_scene;
  bool has_dynamic = false;
  ChamferResult chamfer;
};

SequenceMetrics evaluate_sequence(const PredictedSequence& predicted, const scene::Sequence& truth,
                                  const EvalOptions& options = {});

/// Aggregate = unweighted mean over sequences of every scalar metric.
nlohmann::json metrics_report(const std::vector<SequenceMetrics>& sequences);
nlohmann::json to_json(const SequenceMetrics& m);

}  // namespace mem4d::eval
