#pragma once

#include "mem4d/tca.hpp"

namespace mem4d::tdm {

struct TdmConfig {
  std::size_t memory = 2;          // k_d
  std::size_t pyramid_levels = 3;  // L_pyr, pooling factor 2 per level
  std::size_t layers = 4;          // E_m depth
  bool scale_correlation = true;   // divide dot products by sqrt(C)
  nn::AttentionConfig attention;   // channels = C_m
};

/// All-pairs dot products between two equally sized grids, shape {H, W, H, W}.
Tensor correlation_volume(const nn::TokenGrid& current, const nn::TokenGrid& past, bool scaled = false);

/// Level 0 is the volume itself; each further level pools its last two dims by 2.
std::vector<Tensor> correlation_pyramid(const Tensor& volume, std::size_t levels);

/// Per-position flattened pyramid length for an H x W grid.
std::size_t motion_input_length(std::size_t height, std::size_t width, std::size_t levels);

struct MotionEntry {
  nn::TokenGrid grid;  // H x W x C_m, positions (-j, y, x)
  long distance = 0;
};

/// Rebuilt from scratch each frame; entries ordered j = 1, 2, ...
struct TransientDynamicsMemory {
  std::vector<MotionEntry> entries;
  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

class DynamicsMemoryBuilder {
 public:
  DynamicsMemoryBuilder() = default;
  DynamicsMemoryBuilder(nn::ParamStore& store, const std::string& prefix, const TdmConfig& config,
                        std::size_t grid_height, std::size_t grid_width);

  /// Flattened pyramid -> MLP, giving H*W x C_m (no encoder).
  Tensor motion_features(const std::vector<Tensor>& pyramid) const;

  /// One entry per element of `recent` (previous T' grids, newest first,
  /// at most k_d of them are used).
  TransientDynamicsMemory build(const nn::TokenGrid& current, const tca::HistoryWindow& recent, long t) const;

  const TdmConfig& config() const { return config_; }

 private:
  TdmConfig config_;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  nn::Mlp mlp_;
  nn::AttentionStack encoder_;
};

}  // namespace mem4d::tdm
