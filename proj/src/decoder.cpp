#include "mem4d/decoder.hpp"

#include <cmath>
#include <numbers>

namespace mem4d::decoder {

using nn::Pos3;
using nn::TokenGrid;

Tensor pixel_shuffle(const Tensor& tokens, std::size_t height, std::size_t width) {
  if (tokens.rank() != 2 || tokens.dim(0) != height * width || tokens.dim(1) % 4 != 0) {
    throw ShapeError("pixel_shuffle expects (h*w) x 4c tokens, got " + shape_str(tokens.shape()));
  }
  const std::size_t c = tokens.dim(1) / 4;
  const std::size_t oh = 2 * height, ow = 2 * width;
  auto idx = std::make_shared<std::vector<std::uint32_t>>();
  idx->reserve(oh * ow * c);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      const std::size_t base = ((y / 2) * width + x / 2) * 4 * c + ((y % 2) * 2 + x % 2) * c;
      for (std::size_t ch = 0; ch < c; ++ch) idx->push_back(static_cast<std::uint32_t>(base + ch));
    }
  return gather(tokens, idx, {oh * ow, c});
}

PointmapHead::PointmapHead(nn::ParamStore& store, const std::string& prefix, std::size_t channels,
                           std::size_t patch)
    : patch_(patch) {
  if (patch == 0 || (patch & (patch - 1)) != 0) throw ConfigError("pointmap head needs a power-of-two patch size");
  std::size_t levels = 0;
  while ((std::size_t(1) << levels) < patch) ++levels;
  if (levels == 0) {
    stages_.emplace_back(store, prefix + ".proj", channels, 4);
    return;
  }
  std::size_t c = channels;
  for (std::size_t i = 0; i < levels; ++i) {
    const std::size_t next = i + 1 == levels ? 4 : std::max<std::size_t>(c / 2, 4);
    stages_.emplace_back(store, prefix + ".up" + std::to_string(i), c, 4 * next);
    c = next;
  }
}

std::pair<Tensor, Tensor> PointmapHead::forward(const TokenGrid& grid) const {
  Tensor x = grid.tokens;
  std::size_t h = grid.height, w = grid.width;
  if (x.rank() != 2 || x.dim(0) != h * w) throw ShapeError("pointmap head: tokens do not match the grid");
  if (patch_ == 1) {
    x = stages_.front().forward(x);
  } else {
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      x = pixel_shuffle(stages_[i].forward(x), h, w);
      h *= 2;
      w *= 2;
      if (i + 1 < stages_.size()) x = gelu(x);
    }
  }
  Tensor pixels = reshape(x, {h, w, 4});
  Tensor points = slice(pixels, 2, 0, 3);
  Tensor confidence = add_scalar(exp(reshape(slice(pixels, 2, 3, 4), {h, w})), Real(1));
  return {points, confidence};
}

Tensor intrinsics_from_fov(const Tensor& fov, std::size_t image_height, std::size_t image_width) {
  const Real half_h = static_cast<Real>(image_height) / 2;
  Tensor focal = div(Tensor::full({1}, half_h), tan(scale(fov, Real(0.5))));
  const Tensor mask = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 0});
  const Tensor rest = Tensor::from({3, 3}, {0, 0, static_cast<Real>(image_width) / 2, 0, 0, half_h, 0, 0, 1});
  return add(mul(focal, mask), rest);
}

CameraHead::CameraHead(nn::ParamStore& store, const std::string& prefix, std::size_t channels,
                       std::size_t image_height, std::size_t image_width, Real fov_max_degrees)
    : mlp_(store, prefix + ".mlp", channels, channels, 8),
      image_height_(image_height),
      image_width_(image_width),
      fov_max_(fov_max_degrees * std::numbers::pi_v<Real> / 180) {
  if (!(fov_max_degrees > 0 && fov_max_degrees < 180)) throw ConfigError("fov_max must lie in (0, 180) degrees");
}

CameraOutput CameraHead::forward(const Tensor& camera_token) const { return from_raw(mlp_.forward(camera_token)); }

CameraOutput CameraHead::from_raw(const Tensor& raw_in) const {
  if (raw_in.numel() != 8) throw ShapeError("camera head expects 8 raw values");
  const Tensor raw = reshape(raw_in, {8});
  CameraOutput out;
  out.fov = scale(sigmoid(slice(raw, 0, 0, 1)), fov_max_);
  out.intrinsics = intrinsics_from_fov(out.fov, image_height_, image_width_);
  const Tensor q_raw = slice(raw, 0, 1, 5);
  const Tensor len = norm_last(q_raw);
  if (!(len.item() > Real(1e-8))) {
    out.quaternion = Tensor::from({4}, {1, 0, 0, 0});
    out.degenerate_quaternion = true;
  } else {
    Tensor q = div(q_raw, len);
    out.quaternion = q[0] < 0 ? neg(q) : q;
  }
  out.translation = slice(raw, 0, 5, 8);
  return out;
}

Decoder::Decoder(nn::ParamStore& store, const std::string& prefix, const DecoderConfig& config) : config_(config) {
  if (config.stages == 0) throw ConfigError("readout needs L_read >= 1");
  const std::size_t c = config.attention.channels;
  camera_token_ = store.create(prefix + ".camera_token", {1, c}, nn::Init::kNormal, Real(0.02));
  project_motion_ = config.memory_channels != c;
  project_structure_ = config.structure_channels != c;
  if (project_motion_) motion_proj_ = nn::Linear(store, prefix + ".motion_proj", config.memory_channels, c);
  if (project_structure_) structure_proj_ = nn::Linear(store, prefix + ".structure_proj", config.structure_channels, c);
  for (std::size_t l = 0; l < config.stages; ++l) {
    motion_blocks_.emplace_back(store, prefix + ".motion" + std::to_string(l), config.attention);
    spatial_blocks_.emplace_back(store, prefix + ".spatial" + std::to_string(l), config.attention);
  }
  global_head_ = PointmapHead(store, prefix + ".head_global", c, config.patch);
  self_head_ = PointmapHead(store, prefix + ".head_self", c, config.patch);
  camera_head_ = CameraHead(store, prefix + ".head_camera", c, config.image_height, config.image_width,
                            config.fov_max_degrees);
}

namespace {

// One read block over [camera | frame | memory]; all three parts are updated.
void read_step(const nn::AttentionBlock& block, Tensor& camera, Tensor& frame, Tensor& memory,
               const std::vector<Pos3>& positions) {
  const std::size_t n = frame.dim(0);
  std::vector<Tensor> parts{camera, frame};
  if (memory.defined()) parts.push_back(memory);
  Tensor out = block.forward(concat(parts, 0), positions);
  camera = slice(out, 0, 0, 1);
  frame = slice(out, 0, 1, 1 + n);
  if (parts.size() == 3) memory = slice(out, 0, 1 + n, out.dim(0));
}

}  // namespace

ReadoutResult Decoder::readout(const TokenGrid& frame, const tdm::TransientDynamicsMemory& dynamics,
                               const psm::CompressedBank* structure, long t, ReadoutOptions options,
                               ReadoutTrace* trace) const {
  const std::size_t c = config_.attention.channels;
  if (frame.tokens.rank() != 2 || frame.tokens.dim(1) != c) throw ShapeError("decoder: frame tokens have wrong width");

  std::vector<Pos3> base{{0, -1, -1}};
  const auto grid = nn::grid_positions(frame.height, frame.width, 0);
  base.insert(base.end(), grid.begin(), grid.end());

  Tensor motion;
  std::vector<Pos3> motion_pos = base;
  if (!dynamics.empty()) {
    std::vector<Tensor> parts;
    for (const auto& e : dynamics.entries) {
      parts.push_back(project_motion_ ? motion_proj_.forward(e.grid.tokens) : e.grid.tokens);
      motion_pos.insert(motion_pos.end(), e.grid.positions.begin(), e.grid.positions.end());
    }
    motion = parts.size() == 1 ? parts.front() : concat(parts, 0);
  }
  Tensor spatial;
  std::vector<Pos3> spatial_pos = base;
  if (structure != nullptr && structure->grid.size() > 0) {
    spatial = project_structure_ ? structure_proj_.forward(structure->grid.tokens) : structure->grid.tokens;
    for (const auto& p : structure->grid.positions) spatial_pos.push_back({p.t - static_cast<int>(t), p.y, p.x});
  }

  Tensor camera = camera_token_;
  Tensor tokens = frame.tokens;
  for (std::size_t l = 0; l < config_.stages; ++l) {
    if (options.motion) {
      read_step(motion_blocks_[l], camera, tokens, motion, motion_pos);
      if (trace != nullptr) {
        trace->order.push_back('M');
        trace->motion_tokens.push_back(motion_pos.size());
      }
    }
    if (options.spatial) {
      read_step(spatial_blocks_[l], camera, tokens, spatial, spatial_pos);
      if (trace != nullptr) {
        trace->order.push_back('S');
        trace->spatial_tokens.push_back(spatial_pos.size());
      }
    }
  }
  return ReadoutResult{camera, TokenGrid{tokens, frame.positions, frame.height, frame.width}};
}

FramePrediction Decoder::predict(const ReadoutResult& refined) const {
  FramePrediction p;
  std::tie(p.x_global, p.c_global) = global_head_.forward(refined.frame);
  std::tie(p.x_self, p.c_self) = self_head_.forward(refined.frame);
  CameraOutput cam = camera_head_.forward(refined.camera);
  p.fov = cam.fov;
  p.intrinsics = cam.intrinsics;
  p.quaternion = cam.quaternion;
  p.translation = cam.translation;
  p.degenerate_quaternion = cam.degenerate_quaternion;
  return p;
}

}  // namespace mem4d::decoder
