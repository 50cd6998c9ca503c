#include "mem4d/tdm.hpp"

#include <cmath>

namespace mem4d::tdm {

using nn::Pos3;
using nn::TokenGrid;

Tensor correlation_volume(const TokenGrid& current, const TokenGrid& past, bool scaled) {
  if (current.height != past.height || current.width != past.width) {
    throw ShapeError("correlation volume needs equal grid extents");
  }
  if (current.tokens.rank() != 2 || past.tokens.rank() != 2 || current.tokens.dim(1) != past.tokens.dim(1) ||
      current.tokens.dim(0) != current.height * current.width || past.tokens.dim(0) != past.height * past.width) {
    throw ShapeError("correlation volume: token tensors do not match their grids");
  }
  Tensor dots = pairwise_dot(current.tokens, past.tokens);
  if (scaled) dots = scale(dots, Real(1) / std::sqrt(static_cast<Real>(current.tokens.dim(1))));
  return reshape(dots, {current.height, current.width, past.height, past.width});
}

std::vector<Tensor> correlation_pyramid(const Tensor& volume, std::size_t levels) {
  if (levels == 0) throw ConfigError("correlation pyramid needs at least one level");
  std::vector<Tensor> out{volume};
  for (std::size_t l = 1; l < levels; ++l) out.push_back(pool2d(out.back(), 2));
  return out;
}

std::size_t motion_input_length(std::size_t height, std::size_t width, std::size_t levels) {
  std::size_t n = 0;
  for (std::size_t l = 0; l < levels; ++l) {
    n += height * width;
    height = (height + 1) / 2;
    width = (width + 1) / 2;
  }
  return n;
}

DynamicsMemoryBuilder::DynamicsMemoryBuilder(nn::ParamStore& store, const std::string& prefix,
                                             const TdmConfig& config, std::size_t grid_height,
                                             std::size_t grid_width)
    : config_(config), height_(grid_height), width_(grid_width) {
  if (config.pyramid_levels == 0) throw ConfigError("TDM needs L_pyr >= 1");
  if (config.memory == 0) throw ConfigError("TDM needs k_d >= 1");
  const std::size_t in = motion_input_length(grid_height, grid_width, config.pyramid_levels);
  const std::size_t cm = config.attention.channels;
  mlp_ = nn::Mlp(store, prefix + ".mlp", in, cm, cm);
  encoder_ = nn::AttentionStack(store, prefix + ".encoder", config.attention, config.layers);
}

Tensor DynamicsMemoryBuilder::motion_features(const std::vector<Tensor>& pyramid) const {
  if (pyramid.empty()) throw ArgumentError("motion features need a non-empty pyramid");
  const std::size_t n = pyramid.front().dim(0) * pyramid.front().dim(1);
  std::vector<Tensor> flat;
  for (const auto& level : pyramid) flat.push_back(reshape(level, {n, level.dim(2) * level.dim(3)}));
  return mlp_.forward(flat.size() == 1 ? flat.front() : concat(flat, 1));
}

TransientDynamicsMemory DynamicsMemoryBuilder::build(const TokenGrid& current, const tca::HistoryWindow& recent,
                                                     long t) const {
  if (current.height != height_ || current.width != width_) {
    throw ShapeError("TDM was built for a " + std::to_string(height_) + "x" + std::to_string(width_) + " grid");
  }
  TransientDynamicsMemory mem;
  const std::size_t count = std::min(recent.size(), config_.memory);
  for (std::size_t i = 0; i < count; ++i) {
    const auto& past = recent[i];
    const long j = t - past.frame;
    if (j <= 0) throw ArgumentError("TDM past frame " + std::to_string(past.frame) + " is not before " + std::to_string(t));
    Tensor vol = correlation_volume(current, past.grid, config_.scale_correlation);
    Tensor m = motion_features(correlation_pyramid(vol, config_.pyramid_levels));
    auto pos = nn::grid_positions(height_, width_, static_cast<int>(-j));
    Tensor encoded = encoder_.forward(m, pos);
    mem.entries.push_back({TokenGrid{encoded, std::move(pos), height_, width_}, j});
  }
  return mem;
}

}  // namespace mem4d::tdm
