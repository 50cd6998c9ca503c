#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mem4d/ops.hpp"

namespace mem4d::nn {

/// Rotary coordinate of a token: (time, row, column) in patch units.
struct Pos3 {
  int t = 0;
  int y = 0;
  int x = 0;
  bool operator==(const Pos3&) const = default;
};

/// Token set of one grid: tokens are N x C, one position per token.
struct TokenGrid {
  Tensor tokens;
  std::vector<Pos3> positions;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return positions.size(); }
  std::size_t channels() const { return tokens.dim(1); }
};

/// Positions (t, y, x) of a row-major H x W grid.
std::vector<Pos3> grid_positions(std::size_t height, std::size_t width, int t);

enum class Init { kZeros, kOnes, kNormal };

/// Registry owning every learnable tensor, keyed by hierarchical name.
/// Initial values depend only on (seed, name), so modules built in any order
/// or subset receive identical weights.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  Tensor create(const std::string& name, Shape shape, Init init, Real stddev = Real(0.02));
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<std::string> names() const;
  std::vector<Tensor> tensors() const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t parameter_count() const;
  void zero_grad();
  std::uint64_t seed() const { return seed_; }

  /// Deep copy of all values (fresh storage, same names).
  ParamStore clone() const;
  /// Overwrites values from another store with identical names and shapes.
  void copy_values_from(const ParamStore& other);

 private:
  std::uint64_t seed_;
  std::vector<std::pair<std::string, Tensor>> entries_;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, bool zero_init = false);
  Tensor forward(const Tensor& x) const;
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor weight_;
  Tensor bias_;
};

/// Two-layer GELU perceptron.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out);
  Tensor forward(const Tensor& x) const;

 private:
  Linear fc1_;
  Linear fc2_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& prefix, std::size_t channels);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gain_, bias_); }

 private:
  Tensor gain_;
  Tensor bias_;
};

// ---------------------------------------------------------------------------
// 3D rotary position embedding
// ---------------------------------------------------------------------------

struct RopeTables {
  std::shared_ptr<const std::vector<Real>> cos;
  std::shared_ptr<const std::vector<Real>> sin;
};

/// Cos/sin tables for a head of `head_dim` channels. The head is split into
/// three equal channel blocks for the t, y and x axes; within a block the
/// pair i rotates by coordinate * base^(-2i / block).
RopeTables make_rope_tables(std::span<const Pos3> positions, std::size_t head_dim, Real base);

/// Applies 3D RoPE to x of shape (..., N, head_dim).
Tensor rope3d_apply(const Tensor& x, std::span<const Pos3> positions, Real base);

void validate_rope(std::size_t head_dim, Real base);

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

struct AttentionConfig {
  std::size_t channels = 48;
  std::size_t head_dim = 24;
  Real rope_base = 100;
  std::size_t mlp_ratio = 4;
};

/// Probabilities of the last forward pass, heads x N x N.
struct AttentionTrace {
  std::vector<Real> probabilities;
  std::size_t heads = 0;
  std::size_t tokens = 0;
};

/// Pre-norm residual block: x + Attn(LN(x)), then + MLP(LN(.)).
class AttentionBlock {
 public:
  AttentionBlock() = default;
  AttentionBlock(ParamStore& store, const std::string& prefix, const AttentionConfig& config);

  Tensor forward(const Tensor& tokens, std::span<const Pos3> positions, AttentionTrace* trace = nullptr) const;
  TokenGrid forward(const TokenGrid& grid) const;

  const AttentionConfig& config() const { return config_; }
  std::size_t heads() const { return config_.channels / config_.head_dim; }

 private:
  AttentionConfig config_;
  LayerNorm norm1_, norm2_;
  Linear query_, key_, value_, output_;
  Mlp mlp_;
};

/// Runs a stack of attention blocks over the same positions.
class AttentionStack {
 public:
  AttentionStack() = default;
  AttentionStack(ParamStore& store, const std::string& prefix, const AttentionConfig& config, std::size_t depth);
  Tensor forward(Tensor tokens, std::span<const Pos3> positions) const;
  std::size_t depth() const { return blocks_.size(); }

 private:
  std::vector<AttentionBlock> blocks_;
};

// ---------------------------------------------------------------------------
// Strided convolutions (kernel == stride, edge-replicate padding)
// ---------------------------------------------------------------------------

/// Token-major feature grid: tokens (H*W) x C, row-major over (y, x).
struct Grid2 {
  Tensor tokens;
  std::size_t height = 0;
  std::size_t width = 0;
};

/// Feature stack: tokens (D*H*W) x C, ordered (d, y, x).
struct Grid3 {
  Tensor tokens;
  std::size_t depth = 0;
  std::size_t height = 0;
  std::size_t width = 0;
};

/// Gathers non-overlapping sy x sx windows (edge-replicated) into rows of
/// length sy*sx*C, ordered (dy, dx, c).
Tensor window_rows_2d(const Tensor& tokens, std::size_t height, std::size_t width, std::size_t stride);

Tensor window_rows_3d(const Tensor& tokens, std::size_t depth, std::size_t height, std::size_t width,
                      const std::array<std::size_t, 3>& kernel);

class Conv2dStrided {
 public:
  Conv2dStrided() = default;
  Conv2dStrided(ParamStore& store, const std::string& prefix, std::size_t in_channels, std::size_t out_channels,
                std::size_t stride);
  Grid2 forward(const Grid2& x) const;
  std::size_t stride() const { return stride_; }
  Tensor weight() const { return weight_; }
  Tensor bias() const { return bias_; }

 private:
  std::size_t stride_ = 1;
  std::size_t in_ = 0;
  Tensor weight_;
  Tensor bias_;
};

using Kernel3 = std::array<std::size_t, 3>;

/// Kernels accepted by Conv3dStrided.
bool is_supported_kernel(const Kernel3& kernel);

class Conv3dStrided {
 public:
  Conv3dStrided() = default;
  Conv3dStrided(ParamStore& store, const std::string& prefix, std::size_t channels, const Kernel3& kernel);
  Grid3 forward(const Grid3& x) const;
  const Kernel3& kernel() const { return kernel_; }
  Tensor weight() const { return weight_; }
  Tensor bias() const { return bias_; }

 private:
  Kernel3 kernel_{1, 1, 1};
  std::size_t channels_ = 0;
  Tensor weight_;
  Tensor bias_;
};

/// Non-overlapping P x P patches of an H x W x Cin image, linearly projected.
class PatchEmbed {
 public:
  PatchEmbed() = default;
  PatchEmbed(ParamStore& store, const std::string& prefix, std::size_t in_channels, std::size_t patch,
             std::size_t channels);
  /// image: H_img x W_img x Cin. Token positions are (t, y, x).
  TokenGrid forward(const Tensor& image, int t = 0) const;
  std::size_t patch() const { return patch_; }

 private:
  std::size_t in_channels_ = 3;
  std::size_t patch_ = 8;
  Linear proj_;
};

}  // namespace mem4d::nn
