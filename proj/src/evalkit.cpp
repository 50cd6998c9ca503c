#include "mem4d/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include <Eigen/SVD>

#include "mem4d/errors.hpp"

namespace mem4d::eval {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kDepthFloor = 1e-6;

double median(std::vector<double> v) {
  if (v.empty()) throw InputError("median of an empty set");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  const double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  const double lower = *std::max_element(v.begin(), v.begin() + mid);
  return 0.5 * (lower + upper);
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0 : s / static_cast<double>(v.size());
}

Eigen::Isometry3d to_isometry(const Pose& p) {
  Eigen::Isometry3d t = Eigen::Isometry3d::Identity();
  t.linear() = p.rotation.toRotationMatrix();
  t.translation() = p.translation;
  return t;
}

double rotation_angle_degrees(const Eigen::Matrix3d& r) {
  const double c = std::clamp((r.trace() - 1) / 2, -1.0, 1.0);
  return std::acos(c) * 180 / std::numbers::pi;
}

std::vector<Eigen::Vector3d> subsample(const std::vector<Eigen::Vector3d>& cloud, std::size_t max_points) {
  if (max_points == 0 || cloud.size() <= max_points) return cloud;
  const std::size_t stride = (cloud.size() + max_points - 1) / max_points;
  std::vector<Eigen::Vector3d> out;
  for (std::size_t i = 0; i < cloud.size(); i += stride) out.push_back(cloud[i]);
  return out;
}

Trajectory truth_trajectory(const scene::Sequence& s) {
  Trajectory t;
  for (const auto& f : s.frames) t.push_back({f.rotation, f.translation});
  return t;
}

json depth_json(const DepthResult& d) {
  return {{"abs_rel", d.abs_rel}, {"delta_1_25", d.delta}, {"scale", d.scale}, {"shift", d.shift}, {"pixels", d.pixels}};
}

std::vector<float> flatten(const std::vector<std::vector<double>>& frames) {
  std::vector<float> out;
  for (const auto& f : frames) out.insert(out.end(), f.begin(), f.end());
  return out;
}

std::vector<std::vector<double>> unflatten(const std::vector<float>& v, std::size_t frames) {
  std::vector<std::vector<double>> out(frames);
  const std::size_t per = frames == 0 ? 0 : v.size() / frames;
  for (std::size_t t = 0; t < frames; ++t) out[t].assign(v.begin() + per * t, v.begin() + per * (t + 1));
  return out;
}

}  // namespace

Sim3 Sim3::inverse() const {
  Sim3 inv;
  inv.scale = 1 / scale;
  inv.rotation = rotation.transpose();
  inv.translation = -(inv.scale * (inv.rotation * translation));
  return inv;
}

Sim3 umeyama_sim3(const std::vector<Eigen::Vector3d>& source, const std::vector<Eigen::Vector3d>& target) {
  if (source.size() != target.size()) throw ArgumentError("alignment needs paired point sets");
  const std::size_t n = source.size();
  if (n < 3) throw ArgumentError("alignment needs at least three point pairs");
  Eigen::Vector3d mu_s = Eigen::Vector3d::Zero(), mu_t = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    mu_s += source[i];
    mu_t += target[i];
  }
  mu_s /= static_cast<double>(n);
  mu_t /= static_cast<double>(n);
  double var_s = 0;
  Eigen::Matrix3d sigma = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d ds = source[i] - mu_s;
    var_s += ds.squaredNorm();
    sigma += (target[i] - mu_t) * ds.transpose();
  }
  var_s /= static_cast<double>(n);
  sigma /= static_cast<double>(n);

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d d = svd.singularValues();
  // Rank < 2: rotation about the common line is unconstrained.
  if (!(var_s > 0) || !(d[0] > 0) || d[1] <= 1e-10 * d[0]) {
    throw ArgumentError("degenerate alignment: points are coincident or collinear");
  }
  Eigen::Matrix3d s = Eigen::Matrix3d::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) s(2, 2) = -1;
  Sim3 out;
  out.rotation = svd.matrixU() * s * svd.matrixV().transpose();
  out.scale = (d.asDiagonal() * s).trace() / var_s;
  out.translation = mu_t - out.scale * out.rotation * mu_s;
  return out;
}

double alignment_residual(const Sim3& s, const std::vector<Eigen::Vector3d>& source,
                          const std::vector<Eigen::Vector3d>& target) {
  double r = 0;
  for (std::size_t i = 0; i < source.size(); ++i) r += (s.apply(source[i]) - target[i]).squaredNorm();
  return r;
}

std::vector<Eigen::Vector3d> camera_centers(const Trajectory& trajectory) {
  std::vector<Eigen::Vector3d> out;
  for (const auto& p : trajectory) out.push_back(p.camera_center());
  return out;
}

Trajectory transform_trajectory(const Trajectory& trajectory, const Sim3& s) {
  Trajectory out;
  for (const auto& p : trajectory) {
    const Eigen::Matrix3d r = p.rotation.toRotationMatrix() * s.rotation.transpose();
    const Eigen::Vector3d center = s.apply(p.camera_center());
    Pose q;
    q.rotation = Eigen::Quaterniond(r).normalized();
    q.translation = -(r * center);
    out.push_back(q);
  }
  return out;
}

double ate(const Trajectory& predicted, const Trajectory& truth, bool align) {
  if (predicted.size() != truth.size() || predicted.empty()) throw ArgumentError("ATE needs equal, non-empty trajectories");
  auto pc = camera_centers(predicted);
  const auto gc = camera_centers(truth);
  if (align) {
    const Sim3 s = umeyama_sim3(pc, gc);
    for (auto& p : pc) p = s.apply(p);
  }
  double sq = 0;
  for (std::size_t i = 0; i < pc.size(); ++i) sq += (pc[i] - gc[i]).squaredNorm();
  return std::sqrt(sq / static_cast<double>(pc.size()));
}

RpeResult rpe(const Trajectory& predicted, const Trajectory& truth, std::size_t delta) {
  if (predicted.size() != truth.size()) throw ArgumentError("RPE needs equal-length trajectories");
  if (delta == 0) throw ArgumentError("RPE delta must be positive");
  double st = 0, sr = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i + delta < predicted.size(); ++i) {
    // Motion of camera i+delta expressed in camera i.
    const Eigen::Isometry3d rel_p = to_isometry(predicted[i]) * to_isometry(predicted[i + delta]).inverse();
    const Eigen::Isometry3d rel_g = to_isometry(truth[i]) * to_isometry(truth[i + delta]).inverse();
    const Eigen::Isometry3d err = rel_g.inverse() * rel_p;
    st += err.translation().squaredNorm();
    const double angle = rotation_angle_degrees(err.linear());
    sr += angle * angle;
    ++n;
  }
  if (n == 0) return {};
  return {std::sqrt(st / static_cast<double>(n)), std::sqrt(sr / static_cast<double>(n))};
}

DepthResult depth_metrics(const std::vector<double>& predicted, const std::vector<double>& truth,
                          const std::vector<std::uint8_t>& fit_mask, const std::vector<std::uint8_t>& eval_mask,
                          DepthMode mode, DepthAlignment alignment) {
  const std::size_t n = truth.size();
  if (predicted.size() != n || fit_mask.size() != n || eval_mask.size() != n) {
    throw ShapeError("depth metrics: prediction, truth and masks must have equal sizes");
  }
  auto pred = [&](std::size_t i) { return std::max(predicted[i], kDepthFloor); };
  DepthResult r;
  if (mode == DepthMode::kPerScene) {
    std::vector<double> p, g;
    for (std::size_t i = 0; i < n; ++i) {
      if (!fit_mask[i]) continue;
      if (!(truth[i] > 0)) throw ArgumentError("ground-truth depth must be positive on valid pixels");
      p.push_back(pred(i));
      g.push_back(truth[i]);
    }
    if (p.empty()) throw InputError("depth metrics: alignment mask is empty");
    if (alignment == DepthAlignment::kScale) {
      r.scale = median(g) / median(p);
    } else {
      double sp = 0, sg = 0, spp = 0, spg = 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        sp += p[i];
        sg += g[i];
        spp += p[i] * p[i];
        spg += p[i] * g[i];
      }
      const double m = static_cast<double>(p.size());
      const double det = m * spp - sp * sp;
      if (det > 1e-12 * m * spp) {
        r.scale = (m * spg - sp * sg) / det;
        r.shift = (sg - r.scale * sp) / m;
      } else {
        r.scale = median(g) / median(p);  // constant predictions: shift is unidentifiable
      }
    }
  }
  double abs_rel = 0, inliers = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!eval_mask[i]) continue;
    const double d = truth[i];
    if (!(d > 0)) throw ArgumentError("ground-truth depth must be positive on valid pixels");
    const double p = std::max(r.scale * pred(i) + r.shift, kDepthFloor);
    abs_rel += std::abs(p - d) / d;
    inliers += std::max(p / d, d / p) < 1.25 ? 1 : 0;
    ++r.pixels;
  }
  if (r.pixels == 0) throw InputError("depth metrics: evaluation mask is empty");
  r.abs_rel = abs_rel / static_cast<double>(r.pixels);
  r.delta = inliers / static_cast<double>(r.pixels);
  return r;
}

DepthResult depth_metrics(const std::vector<double>& predicted, const std::vector<double>& truth,
                          const std::vector<std::uint8_t>& mask, DepthMode mode, DepthAlignment alignment) {
  return depth_metrics(predicted, truth, mask, mask, mode, alignment);
}

ChamferResult chamfer_acc_comp(const std::vector<Eigen::Vector3d>& predicted, const std::vector<Eigen::Vector3d>& truth) {
  if (predicted.empty() || truth.empty()) throw InputError("chamfer distance needs two non-empty clouds");
  auto nearest = [](const std::vector<Eigen::Vector3d>& from, const std::vector<Eigen::Vector3d>& to) {
    std::vector<double> d(from.size());
    for (std::size_t i = 0; i < from.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) best = std::min(best, (from[i] - q).squaredNorm());
      d[i] = std::sqrt(best);
    }
    return d;
  };
  const auto acc = nearest(predicted, truth);
  const auto comp = nearest(truth, predicted);
  return {mean(acc), median(acc), mean(comp), median(comp)};
}

void write_predictions(const fs::path& dir, const PredictedSequence& p) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  const std::uint64_t n = p.poses.size(), h = p.height, w = p.width;
  if (p.x_global.size() != n || p.x_self.size() != n || p.confidence.size() != n) {
    throw ShapeError("prediction record has inconsistent frame counts");
  }
  json meta;
  meta["schema_version"] = kReportSchema;
  meta["name"] = p.name;
  meta["height"] = h;
  meta["width"] = w;
  meta["frames"] = json::array();
  for (const auto& pose : p.poses) {
    meta["frames"].push_back(
        {{"quaternion", {pose.rotation.w(), pose.rotation.x(), pose.rotation.y(), pose.rotation.z()}},
         {"translation", {pose.translation.x(), pose.translation.y(), pose.translation.z()}}});
  }
  scene::write_buffer(dir / "x_global.m4db", {n, h, w, 3}, flatten(p.x_global));
  scene::write_buffer(dir / "x_self.m4db", {n, h, w, 3}, flatten(p.x_self));
  scene::write_buffer(dir / "confidence.m4db", {n, h, w}, flatten(p.confidence));
  std::ofstream out(dir / "predictions.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "predictions.json").string());
  out << meta.dump(2) << "\n";
}

PredictedSequence read_predictions(const fs::path& dir) {
  const fs::path meta_path = dir / "predictions.json";
  std::ifstream in(meta_path);
  if (!in) throw IoError("missing prediction record: " + meta_path.string());
  PredictedSequence p;
  try {
    const json meta = json::parse(in);
    if (meta.at("schema_version").get<int>() != kReportSchema) throw IoError("unsupported prediction schema");
    p.name = meta.at("name").get<std::string>();
    p.height = meta.at("height").get<std::size_t>();
    p.width = meta.at("width").get<std::size_t>();
    for (const auto& f : meta.at("frames")) {
      const auto& q = f.at("quaternion");
      const auto& t = f.at("translation");
      p.poses.push_back({Eigen::Quaterniond(q.at(0).get<double>(), q.at(1).get<double>(), q.at(2).get<double>(),
                                            q.at(3).get<double>()),
                         Eigen::Vector3d(t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>())});
    }
  } catch (const json::exception& e) {
    throw IoError("malformed " + meta_path.string() + ": " + e.what());
  }
  const std::uint64_t n = p.poses.size();
  auto load = [&](const char* file, std::uint64_t channels) {
    std::vector<std::uint64_t> dims;
    auto v = scene::read_buffer(dir / file, dims);
    std::vector<std::uint64_t> expect{n, p.height, p.width};
    if (channels > 1) expect.push_back(channels);
    if (dims != expect) throw IoError(std::string("extents of ") + file + " disagree with predictions.json");
    return unflatten(v, n);
  };
  p.x_global = load("x_global.m4db", 3);
  p.x_self = load("x_self.m4db", 3);
  p.confidence = load("confidence.m4db", 1);
  return p;
}

PredictedSequence oracle_predictions(const scene::Sequence& truth) {
  PredictedSequence p;
  p.name = truth.name;
  p.height = truth.height;
  p.width = truth.width;
  for (const auto& f : truth.frames) {
    p.poses.push_back({f.rotation, f.translation});
    p.x_global.push_back(f.x_global);
    p.x_self.push_back(f.x_self);
    p.confidence.emplace_back(f.mask.size(), 1.0);
  }
  return p;
}

SequenceMetrics evaluate_sequence(const PredictedSequence& predicted, const scene::Sequence& truth,
                                  const EvalOptions& options) {
  const std::size_t n = truth.frames.size();
  if (predicted.poses.size() != n || predicted.x_self.size() != n || predicted.x_global.size() != n) {
    throw InputError("prediction for " + truth.name + " has " + std::to_string(predicted.poses.size()) +
                     " frames, ground truth has " + std::to_string(n));
  }
  if (predicted.height != truth.height || predicted.width != truth.width) {
    throw InputError("prediction extents differ from ground truth for " + truth.name);
  }
  SequenceMetrics m;
  m.name = truth.name;

  const Trajectory gt = truth_trajectory(truth);
  Trajectory aligned = predicted.poses;
  const auto pc = camera_centers(predicted.poses), gc = camera_centers(gt);
  try {
    aligned = transform_trajectory(predicted.poses, umeyama_sim3(pc, gc));
  } catch (const ArgumentError&) {
    // Too few or collinear centres: match centroids only.
    Sim3 shift;
    Eigen::Vector3d mp = Eigen::Vector3d::Zero(), mg = Eigen::Vector3d::Zero();
    for (std::size_t i = 0; i < n; ++i) {
      mp += pc[i];
      mg += gc[i];
    }
    shift.translation = (mg - mp) / static_cast<double>(std::max<std::size_t>(n, 1));
    aligned = transform_trajectory(predicted.poses, shift);
    m.trajectory_aligned = false;
  }
  m.ate = ate(aligned, gt, false);
  const RpeResult r = rpe(aligned, gt, options.rpe_delta);
  m.rpe_trans = r.translation;
  m.rpe_rot = r.rotation;

  std::vector<double> pd, gd;
  std::vector<std::uint8_t> mask, dynamic;
  for (std::size_t t = 0; t < n; ++t) {
    const auto& f = truth.frames[t];
    const auto& xs = predicted.x_self[t];
    if (xs.size() != 3 * f.depth.size()) throw InputError("prediction pointmap extents differ for " + truth.name);
    for (std::size_t i = 0; i < f.depth.size(); ++i) {
      pd.push_back(xs[3 * i + 2]);
      gd.push_back(f.depth[i]);
      mask.push_back(f.mask[i]);
      dynamic.push_back(f.mask[i] && f.dynamic[i]);
    }
  }
  m.per_scene = depth_metrics(pd, gd, mask, DepthMode::kPerScene, options.alignment);
  m.metric = depth_metrics(pd, gd, mask, DepthMode::kMetric);
  m.has_dynamic = std::count(dynamic.begin(), dynamic.end(), 1) > 0;
  if (m.has_dynamic) m.dynamic_per_scene = depth_metrics(pd, gd, mask, dynamic, DepthMode::kPerScene, options.alignment);

  // Point clouds in the frame-0 camera frame; predictions take the per-scene depth scale.
  std::vector<Eigen::Vector3d> pred_cloud, gt_cloud;
  for (std::size_t t = 0; t < n; ++t) {
    const auto& f = truth.frames[t];
    const auto& xg = predicted.x_global[t];
    for (std::size_t i = 0; i < f.mask.size(); ++i) {
      if (!f.mask[i]) continue;
      pred_cloud.emplace_back(m.per_scene.scale * Eigen::Vector3d(xg[3 * i], xg[3 * i + 1], xg[3 * i + 2]));
      gt_cloud.emplace_back(f.x_global[3 * i], f.x_global[3 * i + 1], f.x_global[3 * i + 2]);
    }
  }
  m.chamfer = chamfer_acc_comp(subsample(pred_cloud, options.chamfer_max_points),
                               subsample(gt_cloud, options.chamfer_max_points));
  return m;
}

json to_json(const SequenceMetrics& m) {
  json j{{"name", m.name},
         {"ate", m.ate},
         {"rpe_trans", m.rpe_trans},
         {"rpe_rot_deg", m.rpe_rot},
         {"trajectory_aligned", m.trajectory_aligned},
         {"depth_per_scene", depth_json(m.per_scene)},
         {"depth_metric", depth_json(m.metric)},
         {"chamfer",
          {{"acc_mean", m.chamfer.acc_mean},
           {"acc_median", m.chamfer.acc_median},
           {"comp_mean", m.chamfer.comp_mean},
           {"comp_median", m.chamfer.comp_median}}}};
  j["depth_dynamic_per_scene"] = m.has_dynamic ? depth_json(m.dynamic_per_scene) : json(nullptr);
  return j;
}

json metrics_report(const std::vector<SequenceMetrics>& sequences) {
  json report;
  report["schema_version"] = kReportSchema;
  report["sequences"] = json::array();
  std::vector<double> ate_v, rt, rr, ar_s, d_s, ar_m, d_m, ar_dyn, acc, comp;
  for (const auto& m : sequences) {
    report["sequences"].push_back(to_json(m));
    ate_v.push_back(m.ate);
    rt.push_back(m.rpe_trans);
    rr.push_back(m.rpe_rot);
    ar_s.push_back(m.per_scene.abs_rel);
    d_s.push_back(m.per_scene.delta);
    ar_m.push_back(m.metric.abs_rel);
    d_m.push_back(m.metric.delta);
    if (m.has_dynamic) ar_dyn.push_back(m.dynamic_per_scene.abs_rel);
    acc.push_back(m.chamfer.acc_mean);
    comp.push_back(m.chamfer.comp_mean);
  }
  report["aggregate"] = {{"sequences", sequences.size()},
                         {"ate", mean(ate_v)},
                         {"rpe_trans", mean(rt)},
                         {"rpe_rot_deg", mean(rr)},
                         {"abs_rel_per_scene", mean(ar_s)},
                         {"delta_per_scene", mean(d_s)},
                         {"abs_rel_metric", mean(ar_m)},
                         {"delta_metric", mean(d_m)},
                         {"abs_rel_dynamic_per_scene", ar_dyn.empty() ? json(nullptr) : json(mean(ar_dyn))},
                         {"acc_mean", mean(acc)},
                         {"comp_mean", mean(comp)}};
  return report;
}

}  // namespace mem4d::eval
