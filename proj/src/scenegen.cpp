#include "mem4d/scenegen.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "mem4d/checkpoint.hpp"
#include "mem4d/errors.hpp"

namespace mem4d::scene {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kMinHit = 1e-9;

Eigen::Vector3d catmull_rom(const Eigen::Vector3d& p0, const Eigen::Vector3d& p1, const Eigen::Vector3d& p2,
                            const Eigen::Vector3d& p3, double u) {
  const double u2 = u * u, u3 = u2 * u;
  return 0.5 * ((2 * p1) + (-p0 + p2) * u + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u2 + (-p0 + 3 * p1 - 3 * p2 + p3) * u3);
}

// Camera-to-room rotation with columns right, down, forward.
Eigen::Matrix3d look_at(const Eigen::Vector3d& position, const Eigen::Vector3d& target) {
  const Eigen::Vector3d forward = (target - position).normalized();
  Eigen::Vector3d right = forward.cross(Eigen::Vector3d::UnitZ());
  if (right.norm() < 1e-6) throw ConfigError("camera looks straight along the vertical axis");
  right.normalize();
  const Eigen::Vector3d down = forward.cross(right);
  Eigen::Matrix3d r;
  r.col(0) = right;
  r.col(1) = down;
  r.col(2) = forward;
  return r;
}

Eigen::Matrix3d yaw_matrix(double yaw) { return Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix(); }

Eigen::Vector3d shade_texture(const Texture& tex, double u, double v) {
  const long cell = static_cast<long>(std::floor(u / tex.period)) + static_cast<long>(std::floor(v / tex.period));
  return (cell % 2 == 0) ? tex.base : tex.alternate;
}

struct Hit {
  double lambda = std::numeric_limits<double>::infinity();
  int primitive = kNoPrimitive;
  double u = 0, v = 0;
  Eigen::Vector3d normal = Eigen::Vector3d::Zero();
  const Texture* texture = nullptr;
  bool dynamic = false;
};

// Face f of a box: (axis, sign) = (f / 2, f % 2 == 0 ? +1 : -1); surface
// parameters are the two remaining local coordinates in increasing axis order.
std::pair<int, int> face_axes(int face) {
  const int axis = face / 2;
  return {(axis + 1) % 3 < (axis + 2) % 3 ? (axis + 1) % 3 : (axis + 2) % 3,
          (axis + 1) % 3 < (axis + 2) % 3 ? (axis + 2) % 3 : (axis + 1) % 3};
}

void intersect_plane(const Plane& p, int id, const Eigen::Vector3d& o, const Eigen::Vector3d& d, Hit& best) {
  const Eigen::Vector3d n = p.u_axis.cross(p.v_axis);
  const double denom = n.dot(d);
  if (std::abs(denom) < 1e-12) return;
  const double lambda = n.dot(p.origin - o) / denom;
  if (lambda <= kMinHit || lambda >= best.lambda) return;
  const Eigen::Vector3d rel = o + lambda * d - p.origin;
  const double u = rel.dot(p.u_axis), v = rel.dot(p.v_axis);
  if (std::abs(u) > p.u_half || std::abs(v) > p.v_half) return;
  best = Hit{lambda, id, u, v, n, &p.texture, false};
}

void intersect_box(const Box& b, int first_id, const Eigen::Vector3d& o, const Eigen::Vector3d& d, Hit& best) {
  const Eigen::Matrix3d r = yaw_matrix(b.yaw);
  const Eigen::Vector3d lo = r.transpose() * (o - b.center);
  const Eigen::Vector3d ld = r.transpose() * d;
  double t_near = -std::numeric_limits<double>::infinity(), t_far = std::numeric_limits<double>::infinity();
  int near_face = -1;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(ld[a]) < 1e-15) {
      if (std::abs(lo[a]) > b.half_size[a]) return;
      continue;
    }
    double t0 = (-b.half_size[a] - lo[a]) / ld[a];
    double t1 = (b.half_size[a] - lo[a]) / ld[a];
    int face0 = 2 * a + 1;  // entering through -a
    if (t0 > t1) {
      std::swap(t0, t1);
      face0 = 2 * a;
    }
    if (t0 > t_near) {
      t_near = t0;
      near_face = face0;
    }
    t_far = std::min(t_far, t1);
  }
  // Cameras are kept outside boxes, so only the entry face can be visible.
  if (near_face < 0 || t_near > t_far || t_near <= kMinHit || t_near >= best.lambda) return;
  const Eigen::Vector3d local = lo + t_near * ld;
  const auto [ua, va] = face_axes(near_face);
  Eigen::Vector3d n_local = Eigen::Vector3d::Zero();
  n_local[near_face / 2] = near_face % 2 == 0 ? 1 : -1;
  best = Hit{t_near, first_id + near_face, local[ua], local[va], r * n_local, &b.texture, false};
}

void intersect_sphere(const DynamicSphere& s, int id, double t, const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                      Hit& best) {
  const Eigen::Vector3d c = s.center(t);
  const Eigen::Vector3d oc = o - c;
  const double a = d.squaredNorm(), half_b = oc.dot(d), cc = oc.squaredNorm() - s.radius * s.radius;
  const double disc = half_b * half_b - a * cc;
  if (disc < 0) return;
  const double root = std::sqrt(disc);
  double lambda = (-half_b - root) / a;
  if (lambda <= kMinHit) lambda = (-half_b + root) / a;
  if (lambda <= kMinHit || lambda >= best.lambda) return;
  const Eigen::Vector3d n = (o + lambda * d - c) / s.radius;
  const Eigen::Vector3d body = s.spin(t).transpose() * n;
  const double lon = std::atan2(body.y(), body.x()), lat = std::asin(std::clamp(body.z(), -1.0, 1.0));
  best = Hit{lambda, id, lon, lat, n, &s.texture, true};
}

Texture random_texture(std::mt19937_64& rng, double lo_period, double hi_period) {
  std::uniform_real_distribution<double> colour(0.2, 0.9), period(lo_period, hi_period), dim(0.35, 0.6);
  Texture t;
  t.base = Eigen::Vector3d(colour(rng), colour(rng), colour(rng));
  const Eigen::Vector3d other(colour(rng), colour(rng), colour(rng));
  t.alternate = dim(rng) * other;
  t.period = period(rng);
  return t;
}

void append(std::vector<double>& out, const Eigen::Vector3d& v) { out.insert(out.end(), {v.x(), v.y(), v.z()}); }

}  // namespace

void SceneConfig::validate() const {
  if (width == 0 || height == 0) throw ConfigError("scene extents must be positive");
  if (frames == 0) throw ConfigError("scene needs at least one frame");
  if (!(fov_degrees > 1 && fov_degrees < 170)) throw ConfigError("scene fov must lie in (1, 170) degrees");
  if (!room && static_boxes == 0) throw ConfigError("scene needs at least one static primitive");
  if (!(room_half_extent >= 2)) throw ConfigError("room_half_extent must be at least 2");
  if (!(room_wall_height > 0.5)) throw ConfigError("room_wall_height must exceed 0.5");
  if (!(far_plane > 2 * std::sqrt(2.0) * room_half_extent + room_wall_height)) {
    throw ConfigError("far plane must enclose the whole room");
  }
  if (!(camera_speed >= 0 && camera_speed <= 0.5)) throw ConfigError("camera_speed must lie in [0, 0.5]");
}

Eigen::Vector3d DynamicSphere::center(double t) const {
  switch (kind) {
    case TrajectoryKind::kLinear:
      return start + speed * t * direction;
    case TrajectoryKind::kCircular: {
      // Circle through `start` whose centre lies `amplitude` behind it along `direction`.
      const Eigen::Vector3d side = Eigen::Vector3d::UnitZ().cross(direction);
      const double a = angular_speed * t;
      return start + amplitude * ((std::cos(a) - 1) * direction + std::sin(a) * side);
    }
    case TrajectoryKind::kSine:
      return start + amplitude * (std::sin(phase + angular_speed * t) - std::sin(phase)) * direction;
  }
  return start;
}

Eigen::Matrix3d DynamicSphere::spin(double t) const { return yaw_matrix(phase + angular_speed * t); }

std::pair<Eigen::Matrix3d, Eigen::Vector3d> SceneSpec::camera_in_room(double t) const {
  if (waypoints.size() != 4) throw ConfigError("camera path needs four Catmull-Rom control points");
  const double u = config.frames > 1 ? t / static_cast<double>(config.frames - 1) : 0;
  const auto& w = waypoints;
  const Eigen::Vector3d pos = catmull_rom(w[0].position, w[1].position, w[2].position, w[3].position, u);
  const Eigen::Vector3d target = catmull_rom(w[0].target, w[1].target, w[2].target, w[3].target, u);
  return {look_at(pos, target), pos};
}

std::uint64_t SceneSpec::digest() const {
  std::vector<double> v{static_cast<double>(seed), static_cast<double>(config.width),
                        static_cast<double>(config.height), static_cast<double>(config.frames), config.fov_degrees};
  auto tex = [&](const Texture& t) {
    append(v, t.base);
    append(v, t.alternate);
    v.push_back(t.period);
  };
  for (const auto& p : planes) {
    append(v, p.origin);
    append(v, p.u_axis);
    append(v, p.v_axis);
    v.insert(v.end(), {p.u_half, p.v_half});
    tex(p.texture);
  }
  for (const auto& b : boxes) {
    append(v, b.center);
    append(v, b.half_size);
    v.push_back(b.yaw);
    tex(b.texture);
  }
  for (const auto& s : spheres) {
    v.insert(v.end(), {s.radius, static_cast<double>(s.kind), s.speed, s.amplitude, s.angular_speed, s.phase});
    append(v, s.start);
    append(v, s.direction);
    tex(s.texture);
  }
  for (const auto& w : waypoints) {
    append(v, w.position);
    append(v, w.target);
  }
  return fnv1a64(v.data(), v.size() * sizeof(double));
}

Eigen::Matrix3d intrinsics_for(const SceneConfig& config) {
  const double f = static_cast<double>(config.height) / 2 / std::tan(config.fov_degrees * kPi / 360);
  Eigen::Matrix3d k;
  k << f, 0, static_cast<double>(config.width) / 2, 0, f, static_cast<double>(config.height) / 2, 0, 0, 1;
  return k;
}

SceneSpec generate_scene(std::uint64_t seed, const SceneConfig& config) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0, 1);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  SceneSpec spec;
  spec.seed = seed;
  spec.config = config;
  const double a = config.room_half_extent, h = config.room_wall_height;

  if (config.room) {
    const Eigen::Vector3d ex = Eigen::Vector3d::UnitX(), ey = Eigen::Vector3d::UnitY(), ez = Eigen::Vector3d::UnitZ();
    // Floor, then walls at +x, -x, +y, -y; u x v points into the room.
    spec.planes.push_back({Eigen::Vector3d(0, 0, 0), ex, ey, a, a, random_texture(rng, 0.3, 0.6)});
    spec.planes.push_back({Eigen::Vector3d(a, 0, h / 2), ez, ey, h / 2, a, random_texture(rng, 0.3, 0.6)});
    spec.planes.push_back({Eigen::Vector3d(-a, 0, h / 2), ey, ez, a, h / 2, random_texture(rng, 0.3, 0.6)});
    spec.planes.push_back({Eigen::Vector3d(0, a, h / 2), ex, ez, a, h / 2, random_texture(rng, 0.3, 0.6)});
    spec.planes.push_back({Eigen::Vector3d(0, -a, h / 2), ez, ex, h / 2, a, random_texture(rng, 0.3, 0.6)});
  }

  // Camera: orbit-like sweep around a focus point near the room centre.
  const Eigen::Vector3d focus(uniform(-0.6, 0.6), uniform(-0.6, 0.6), 0.45);
  const double heading = uniform(0, 2 * kPi);
  const double radius = uniform(2.0, 2.4);
  const double height = uniform(1.1, 1.5);
  const double sweep = config.camera_speed * static_cast<double>(std::max<std::size_t>(config.frames, 2) - 1) / radius;
  const double direction = unit(rng) < 0.5 ? -1 : 1;
  auto orbit = [&](double angle, double lift) {
    Eigen::Vector3d p = focus + radius * Eigen::Vector3d(std::cos(angle), std::sin(angle), 0);
    p.x() = std::clamp(p.x(), -a + 0.4, a - 0.4);
    p.y() = std::clamp(p.y(), -a + 0.4, a - 0.4);
    p.z() = height + lift;
    return p;
  };
  for (int k = -1; k <= 2; ++k) {
    const double angle = heading + direction * sweep * k;
    const Eigen::Vector3d jitter(uniform(-0.1, 0.1), uniform(-0.1, 0.1), uniform(-0.05, 0.05));
    spec.waypoints.push_back({orbit(angle, uniform(-0.1, 0.1)), focus + jitter});
  }

  auto clear_of_camera = [&](const Eigen::Vector3d& c, double r) {
    for (int i = 0; i <= 20; ++i) {
      const double t = static_cast<double>(i) / 20 * static_cast<double>(config.frames - 1);
      if ((spec.camera_in_room(t).second - c).norm() < r + 0.5) return false;
    }
    return true;
  };

  for (std::size_t i = 0; i < config.static_boxes; ++i) {
    Box b;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 200) throw ConfigError("could not place static boxes clear of the camera path");
      b.half_size = Eigen::Vector3d(uniform(0.15, 0.45), uniform(0.15, 0.45), uniform(0.15, 0.5));
      b.center = Eigen::Vector3d(focus.x() + uniform(-1.2, 1.2), focus.y() + uniform(-1.2, 1.2), b.half_size.z());
      if (std::abs(b.center.x()) + b.half_size.norm() < a && std::abs(b.center.y()) + b.half_size.norm() < a &&
          clear_of_camera(b.center, b.half_size.norm()))
        break;
    }
    b.yaw = uniform(0, kPi);
    b.texture = random_texture(rng, 0.1, 0.25);
    spec.boxes.push_back(b);
  }

  for (std::size_t i = 0; i < config.dynamic_count; ++i) {
    DynamicSphere s;
    const double choice = unit(rng);
    s.kind = choice < 1.0 / 3 ? TrajectoryKind::kLinear
                              : (choice < 2.0 / 3 ? TrajectoryKind::kCircular : TrajectoryKind::kSine);
    s.radius = uniform(0.2, 0.35);
    const double dir = uniform(0, 2 * kPi);
    s.direction = Eigen::Vector3d(std::cos(dir), std::sin(dir), 0);
    s.speed = uniform(0.04, 0.08);
    s.amplitude = uniform(0.3, 0.6);
    s.angular_speed = uniform(0.2, 0.5);
    s.phase = uniform(0, 2 * kPi);
    for (int attempt = 0;; ++attempt) {
      if (attempt > 200) throw ConfigError("could not place dynamic objects clear of the camera path");
      s.start = Eigen::Vector3d(focus.x() + uniform(-0.6, 0.6), focus.y() + uniform(-0.6, 0.6),
                                s.radius + uniform(0.05, 0.4));
      bool clear = true;
      for (int k = 0; k <= 20 && clear; ++k) {
        const double t = static_cast<double>(k) / 20 * static_cast<double>(config.frames - 1);
        const Eigen::Vector3d c = s.center(t);
        clear = clear_of_camera(c, s.radius) && std::abs(c.x()) + s.radius < a && std::abs(c.y()) + s.radius < a;
      }
      if (clear) break;
    }
    s.texture = random_texture(rng, 0.5, 0.9);  // radians
    spec.spheres.push_back(s);
  }
  return spec;
}

namespace {

// Room-to-world (frame-0 camera) transform.
struct RoomToWorld {
  Eigen::Matrix3d rotation;
  Eigen::Vector3d origin;
  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * (p - origin); }
};

RoomToWorld room_to_world(const SceneSpec& spec) {
  const auto [r0, p0] = spec.camera_in_room(0);
  return {r0.transpose(), p0};
}

}  // namespace

Eigen::Vector3d static_surface_point(const SceneSpec& spec, int primitive, double u, double v) {
  const RoomToWorld to_world = room_to_world(spec);
  const int planes = static_cast<int>(spec.planes.size());
  const int box_ids = 6 * static_cast<int>(spec.boxes.size());
  if (primitive >= 0 && primitive < planes) {
    const Plane& p = spec.planes[primitive];
    return to_world.apply(p.origin + u * p.u_axis + v * p.v_axis);
  }
  if (primitive >= planes && primitive < planes + box_ids) {
    const Box& b = spec.boxes[(primitive - planes) / 6];
    const int face = (primitive - planes) % 6;
    const auto [ua, va] = face_axes(face);
    Eigen::Vector3d local;
    local[face / 2] = face % 2 == 0 ? b.half_size[face / 2] : -b.half_size[face / 2];
    local[ua] = u;
    local[va] = v;
    return to_world.apply(b.center + yaw_matrix(b.yaw) * local);
  }
  throw ArgumentError("primitive " + std::to_string(primitive) + " is not a static surface");
}

RenderedFrame render_frame(const SceneSpec& spec, std::size_t t) {
  const SceneConfig& cfg = spec.config;
  if (t >= cfg.frames) throw ArgumentError("frame index " + std::to_string(t) + " out of range");
  const std::size_t h = cfg.height, w = cfg.width, n = h * w;
  const double time = static_cast<double>(t);

  RenderedFrame f;
  f.height = h;
  f.width = w;
  f.rgb.assign(3 * n, 0.f);
  f.depth.assign(n, 0);
  f.x_global.assign(3 * n, 0);
  f.x_self.assign(3 * n, 0);
  f.mask.assign(n, 0);
  f.dynamic.assign(n, 0);
  f.primitive.assign(n, kNoPrimitive);
  f.surface_uv.assign(2 * n, 0);
  f.intrinsics = intrinsics_for(cfg);

  const RoomToWorld to_world = room_to_world(spec);
  const auto [r_room_cam, position] = spec.camera_in_room(time);
  if (t == 0) {
    f.rotation = Eigen::Quaterniond::Identity();
    f.translation = Eigen::Vector3d::Zero();
  } else {
    // world -> room -> camera t.
    const Eigen::Matrix3d r_cam_room = r_room_cam.transpose();
    Eigen::Quaterniond q(r_cam_room * to_world.rotation.transpose());
    q.normalize();
    if (q.w() < 0) q.coeffs() *= -1;
    f.rotation = q;
    f.translation = r_cam_room * (to_world.origin - position);
  }
  const Eigen::Matrix3d r_world_to_cam = f.rotation.toRotationMatrix();

  const Eigen::Vector3d light = Eigen::Vector3d(0.3, 0.5, 1.0).normalized();
  const double fx = f.intrinsics(0, 0), fy = f.intrinsics(1, 1), cx = f.intrinsics(0, 2), cy = f.intrinsics(1, 2);
  const int plane_count = static_cast<int>(spec.planes.size());
  const int box_base = plane_count;
  const int sphere_base = plane_count + 6 * static_cast<int>(spec.boxes.size());

  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const Eigen::Vector3d d_cam((static_cast<double>(x) + 0.5 - cx) / fx, (static_cast<double>(y) + 0.5 - cy) / fy, 1);
      const Eigen::Vector3d d = r_room_cam * d_cam;
      Hit best;
      for (int i = 0; i < plane_count; ++i) intersect_plane(spec.planes[i], i, position, d, best);
      for (std::size_t i = 0; i < spec.boxes.size(); ++i)
        intersect_box(spec.boxes[i], box_base + 6 * static_cast<int>(i), position, d, best);
      for (std::size_t i = 0; i < spec.spheres.size(); ++i)
        intersect_sphere(spec.spheres[i], sphere_base + static_cast<int>(i), time, position, d, best);
      // d_cam has unit z, so lambda is the camera-frame depth.
      if (best.primitive == kNoPrimitive || best.lambda > cfg.far_plane) continue;

      const std::size_t i = y * w + x;
      const Eigen::Vector3d world = to_world.apply(position + best.lambda * d);
      const Eigen::Vector3d self = r_world_to_cam * world + f.translation;
      f.mask[i] = 1;
      f.dynamic[i] = best.dynamic ? 1 : 0;
      f.primitive[i] = best.primitive;
      f.surface_uv[2 * i] = best.u;
      f.surface_uv[2 * i + 1] = best.v;
      f.depth[i] = self.z();
      for (int c = 0; c < 3; ++c) {
        f.x_global[3 * i + c] = world[c];
        f.x_self[3 * i + c] = self[c];
      }
      Eigen::Vector3d normal = best.normal;
      if (normal.dot(d) > 0) normal = -normal;
      const double shade = 0.35 + 0.65 * std::max(0.0, normal.dot(light));
      const Eigen::Vector3d colour = shade * shade_texture(*best.texture, best.u, best.v);
      for (int c = 0; c < 3; ++c) f.rgb[3 * i + c] = static_cast<float>(std::clamp(colour[c], 0.0, 1.0));
    }
  }
  return f;
}

}  // namespace mem4d::scene
