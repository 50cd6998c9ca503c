#pragma once

#include "mem4d/psm.hpp"
#include "mem4d/tdm.hpp"

namespace mem4d::decoder {

struct DecoderConfig {
  std::size_t stages = 4;          // L_read
  std::size_t memory_channels = 48;   // C_m
  std::size_t structure_channels = 48;  // C_s
  std::size_t patch = 8;
  std::size_t image_height = 48;
  std::size_t image_width = 64;
  Real fov_max_degrees = 120;
  nn::AttentionConfig attention;   // channels = C
};

/// Heads' output for one frame. Pointmaps are H_img x W_img x 3, confidences
/// H_img x W_img with values > 1.
struct FramePrediction {
  Tensor x_global, c_global;
  Tensor x_self, c_self;
  Tensor fov;         // {1}, radians
  Tensor intrinsics;  // {3, 3}
  Tensor quaternion;  // {4}, (w, x, y, z), unit, w >= 0
  Tensor translation; // {3}
  bool degenerate_quaternion = false;
};

struct ReadoutOptions {
  bool motion = true;   // false skips every MotionReadBlock
  bool spatial = true;  // false skips every SpatialReadBlock
};

struct ReadoutTrace {
  std::string order;  // one character per block call: 'M' or 'S'
  std::vector<std::size_t> motion_tokens;
  std::vector<std::size_t> spatial_tokens;
};

struct ReadoutResult {
  Tensor camera;  // {1, C}
  nn::TokenGrid frame;
};

/// Per-token linear maps to 4x channels followed by 2x pixel shuffles,
/// log2(patch) times: C -> C/2 -> C/4 -> ... -> 4 (xyz + raw confidence).
class PointmapHead {
 public:
  PointmapHead() = default;
  PointmapHead(nn::ParamStore& store, const std::string& prefix, std::size_t channels, std::size_t patch);

  /// Returns {points H_img x W_img x 3, confidence H_img x W_img}.
  std::pair<Tensor, Tensor> forward(const nn::TokenGrid& tokens) const;

 private:
  std::size_t patch_ = 8;
  std::vector<nn::Linear> stages_;
};

/// Rearranges (h*w) x (4c) tokens, channel order (dy, dx, c), into (2h*2w) x c.
Tensor pixel_shuffle(const Tensor& tokens, std::size_t height, std::size_t width);

struct CameraOutput {
  Tensor fov, intrinsics, quaternion, translation;
  bool degenerate_quaternion = false;
};

class CameraHead {
 public:
  CameraHead() = default;
  CameraHead(nn::ParamStore& store, const std::string& prefix, std::size_t channels, std::size_t image_height,
             std::size_t image_width, Real fov_max_degrees);

  CameraOutput forward(const Tensor& camera_token) const;
  /// Maps raw head outputs (logit, q[4], tau[3]) to the camera; exposed for tests.
  CameraOutput from_raw(const Tensor& raw) const;

 private:
  nn::Mlp mlp_;
  std::size_t image_height_ = 48;
  std::size_t image_width_ = 64;
  Real fov_max_ = 0;
};

/// K for a vertical field of view, square pixels and a centred principal point.
Tensor intrinsics_from_fov(const Tensor& fov, std::size_t image_height, std::size_t image_width);

class Decoder {
 public:
  Decoder() = default;
  Decoder(nn::ParamStore& store, const std::string& prefix, const DecoderConfig& config);

  /// Alternating motion / spatial read blocks. Memory tokens are
  /// refined across stages and dropped afterwards. `structure` may be null.
  ReadoutResult readout(const nn::TokenGrid& frame, const tdm::TransientDynamicsMemory& dynamics,
                        const psm::CompressedBank* structure, long t, ReadoutOptions options = {},
                        ReadoutTrace* trace = nullptr) const;

  FramePrediction predict(const ReadoutResult& refined) const;

  const DecoderConfig& config() const { return config_; }
  const Tensor& camera_token() const { return camera_token_; }

 private:
  DecoderConfig config_;
  Tensor camera_token_;
  nn::Linear motion_proj_, structure_proj_;
  bool project_motion_ = false, project_structure_ = false;
  std::vector<nn::AttentionBlock> motion_blocks_, spatial_blocks_;
  PointmapHead global_head_, self_head_;
  CameraHead camera_head_;
};

}  // namespace mem4d::decoder
