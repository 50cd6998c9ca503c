#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Geometry>

namespace mem4d::scene {

/// Generation knobs. Scenes live in a "room" frame with z up; everything
/// exported is re-expressed in the frame of camera 0.
struct SceneConfig {
  std::size_t width = 64;
  std::size_t height = 48;
  std::size_t frames = 8;
  double fov_degrees = 60;  // vertical
  bool room = true;         // floor and four walls, open top
  std::size_t static_boxes = 2;
  std::size_t dynamic_count = 1;
  double room_half_extent = 3;
  double room_wall_height = 2.5;
  double far_plane = 20;
  double camera_speed = 0.08;  // spline span covered per frame, in metres (roughly)

  void validate() const;
};

enum class TrajectoryKind { kLinear, kCircular, kSine };

struct Texture {
  Eigen::Vector3d base{0.5, 0.5, 0.5};
  Eigen::Vector3d alternate{0.2, 0.2, 0.2};
  double period = 0.5;  // checker cell size in surface units
};

/// Bounded plane: origin + u * u_axis + v * v_axis with |u| <= u_half, |v| <= v_half.
struct Plane {
  Eigen::Vector3d origin, u_axis, v_axis;  // orthonormal
  double u_half = 1, v_half = 1;
  Texture texture;
};

struct Box {
  Eigen::Vector3d center, half_size;
  double yaw = 0;  // about room z
  Texture texture;
};

struct DynamicSphere {
  double radius = 0.3;
  TrajectoryKind kind = TrajectoryKind::kLinear;
  Eigen::Vector3d start;      // centre at t = 0
  Eigen::Vector3d direction;  // unit; linear motion or sine axis
  double speed = 0.05;        // linear: metres per frame
  double amplitude = 0.5;     // circular radius or sine amplitude
  double angular_speed = 0.3; // radians per frame (circular phase, sine phase, spin)
  double phase = 0;
  Texture texture;

  Eigen::Vector3d center(double t) const;
  /// Body rotation at t; the texture is painted in body coordinates.
  Eigen::Matrix3d spin(double t) const;
};

struct CameraWaypoint {
  Eigen::Vector3d position, target;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  SceneConfig config;
  std::vector<Plane> planes;
  std::vector<Box> boxes;
  std::vector<DynamicSphere> spheres;
  std::vector<CameraWaypoint> waypoints;  // Catmull-Rom control points

  /// Camera-to-room rotation / position for frame t (0 <= t < frames).
  std::pair<Eigen::Matrix3d, Eigen::Vector3d> camera_in_room(double t) const;
  /// Stable 64-bit digest of every generated field.
  std::uint64_t digest() const;
};

/// Per-pixel primitive tags: planes first, then six ids per box (faces
/// +x, -x, +y, -y, +z, -z in box coordinates), then spheres; -1 for no hit.
constexpr int kNoPrimitive = -1;

struct RenderedFrame {
  std::size_t height = 0, width = 0;
  std::vector<float> rgb;          // H x W x 3 in [0, 1]
  std::vector<double> depth;       // H x W, z of x_self; 0 where invalid
  std::vector<double> x_global;    // H x W x 3, frame-0 camera coordinates
  std::vector<double> x_self;      // H x W x 3, current camera coordinates
  std::vector<std::uint8_t> mask;  // 1 valid
  std::vector<std::uint8_t> dynamic;
  std::vector<int> primitive;      // hit primitive id
  std::vector<double> surface_uv;  // H x W x 2, surface parameters of the hit
  Eigen::Matrix3d intrinsics;
  Eigen::Quaterniond rotation;     // world-to-camera, w >= 0
  Eigen::Vector3d translation;
};

SceneSpec generate_scene(std::uint64_t seed, const SceneConfig& config);

/// Camera intrinsics for a vertical field of view; principal point at the image centre.
Eigen::Matrix3d intrinsics_for(const SceneConfig& config);

RenderedFrame render_frame(const SceneSpec& spec, std::size_t t);

/// World (frame-0 camera) point of a static primitive at surface parameters (u, v).
/// Throws for sphere ids; spheres move.
Eigen::Vector3d static_surface_point(const SceneSpec& spec, int primitive, double u, double v);

}  // namespace mem4d::scene
