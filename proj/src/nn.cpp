#include "mem4d/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace mem4d::nn {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

std::vector<Pos3> grid_positions(std::size_t height, std::size_t width, int t) {
  std::vector<Pos3> p;
  p.reserve(height * width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) p.push_back({t, static_cast<int>(y), static_cast<int>(x)});
  return p;
}

// ---------------------------------------------------------------------------
// ParamStore

Tensor ParamStore::create(const std::string& name, Shape shape, Init init, Real stddev) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  const std::size_t n = shape_numel(shape);
  std::vector<Real> v(n, Real(0));
  switch (init) {
    case Init::kZeros: break;
    case Init::kOnes: std::fill(v.begin(), v.end(), Real(1)); break;
    case Init::kNormal: {
      std::mt19937_64 rng(splitmix64(seed_ ^ fnv1a(name)));
      std::normal_distribution<double> dist(0.0, 1.0);
      for (auto& x : v) x = static_cast<Real>(dist(rng)) * stddev;
      break;
    }
  }
  Tensor t = Tensor::from(std::move(shape), std::move(v), true);
  entries_.emplace_back(name, t);
  return t;
}

Tensor ParamStore::get(const std::string& name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  throw ConfigError("unknown parameter: " + name);
}

bool ParamStore::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.first);
  return out;
}

std::vector<Tensor> ParamStore::tensors() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_) out.push_back(e.second);
  return out;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

ParamStore ParamStore::clone() const {
  ParamStore out(seed_);
  for (const auto& [n, t] : entries_) out.entries_.emplace_back(n, Tensor::from(t.shape(), t.to_vector(), true));
  return out;
}

void ParamStore::copy_values_from(const ParamStore& other) {
  if (other.entries_.size() != entries_.size()) throw ConfigError("parameter registries differ in size");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first != other.entries_[i].first || entries_[i].second.shape() != other.entries_[i].second.shape()) {
      throw ConfigError("parameter registries differ at " + entries_[i].first);
    }
    auto dst = entries_[i].second.mutable_data();
    auto src = other.entries_[i].second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

// ---------------------------------------------------------------------------
// Small layers

Linear::Linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, bool zero_init) {
  const Real std = Real(1) / std::sqrt(static_cast<Real>(in));
  weight_ = store.create(prefix + ".weight", {in, out}, zero_init ? Init::kZeros : Init::kNormal, std);
  bias_ = store.create(prefix + ".bias", {out}, Init::kZeros);
}

Tensor Linear::forward(const Tensor& x) const { return add(matmul(x, weight_), bias_); }

Mlp::Mlp(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out)
    : fc1_(store, prefix + ".fc1", in, hidden), fc2_(store, prefix + ".fc2", hidden, out) {}

Tensor Mlp::forward(const Tensor& x) const { return fc2_.forward(gelu(fc1_.forward(x))); }

LayerNorm::LayerNorm(ParamStore& store, const std::string& prefix, std::size_t channels)
    : gain_(store.create(prefix + ".gain", {channels}, Init::kOnes)),
      bias_(store.create(prefix + ".bias", {channels}, Init::kZeros)) {}

// ---------------------------------------------------------------------------
// RoPE

void validate_rope(std::size_t head_dim, Real base) {
  if (head_dim == 0 || head_dim % 6 != 0) {
    throw ConfigError("3D RoPE needs a head dimension divisible by 6, got " + std::to_string(head_dim));
  }
  if (!(base > Real(1))) throw ConfigError("3D RoPE frequency base must exceed 1");
}

RopeTables make_rope_tables(std::span<const Pos3> positions, std::size_t head_dim, Real base) {
  validate_rope(head_dim, base);
  const std::size_t block = head_dim / 3;
  const std::size_t pairs_per_axis = block / 2;
  const std::size_t half = head_dim / 2;
  std::vector<Real> freq(pairs_per_axis);
  for (std::size_t i = 0; i < pairs_per_axis; ++i) {
    freq[i] = std::pow(base, -Real(2) * static_cast<Real>(i) / static_cast<Real>(block));
  }
  auto cs = std::make_shared<std::vector<Real>>(positions.size() * half);
  auto sn = std::make_shared<std::vector<Real>>(positions.size() * half);
  for (std::size_t n = 0; n < positions.size(); ++n) {
    const int coord[3] = {positions[n].t, positions[n].y, positions[n].x};
    for (std::size_t axis = 0; axis < 3; ++axis) {
      for (std::size_t i = 0; i < pairs_per_axis; ++i) {
        const Real angle = static_cast<Real>(coord[axis]) * freq[i];
        (*cs)[n * half + axis * pairs_per_axis + i] = std::cos(angle);
        (*sn)[n * half + axis * pairs_per_axis + i] = std::sin(angle);
      }
    }
  }
  return {cs, sn};
}

Tensor rope3d_apply(const Tensor& x, std::span<const Pos3> positions, Real base) {
  const std::size_t d = x.shape().back();
  if (x.rank() < 2 || x.dim(x.rank() - 2) != positions.size()) {
    throw ShapeError("rope3d_apply: token count does not match positions");
  }
  auto tables = make_rope_tables(positions, d, base);
  return rotate_pairs(x, tables.cos, tables.sin);
}

// ---------------------------------------------------------------------------
// Attention

AttentionBlock::AttentionBlock(ParamStore& store, const std::string& prefix, const AttentionConfig& config)
    : config_(config) {
  if (config.head_dim == 0 || config.channels % config.head_dim != 0) {
    throw ConfigError("channel count " + std::to_string(config.channels) + " is not a multiple of head dim " +
                      std::to_string(config.head_dim));
  }
  validate_rope(config.head_dim, config.rope_base);
  const std::size_t c = config.channels;
  norm1_ = LayerNorm(store, prefix + ".norm1", c);
  query_ = Linear(store, prefix + ".query", c, c);
  key_ = Linear(store, prefix + ".key", c, c);
  value_ = Linear(store, prefix + ".value", c, c);
  output_ = Linear(store, prefix + ".output", c, c);
  norm2_ = LayerNorm(store, prefix + ".norm2", c);
  mlp_ = Mlp(store, prefix + ".mlp", c, c * config.mlp_ratio, c);
}

Tensor AttentionBlock::forward(const Tensor& tokens, std::span<const Pos3> positions, AttentionTrace* trace) const {
  const std::size_t c = config_.channels;
  if (tokens.rank() != 2 || tokens.dim(1) != c) {
    throw ShapeError("attention block expects N x " + std::to_string(c) + " tokens, got " + shape_str(tokens.shape()));
  }
  const std::size_t n = tokens.dim(0);
  if (positions.size() != n) throw ShapeError("attention block: positions do not match tokens");
  const std::size_t h = heads();
  const std::size_t d = config_.head_dim;

  auto split = [&](const Tensor& t) { return permute(reshape(t, {n, h, d}), {1, 0, 2}); };
  const Tensor normed = norm1_.forward(tokens);
  const auto tables = make_rope_tables(positions, d, config_.rope_base);
  Tensor q = rotate_pairs(split(query_.forward(normed)), tables.cos, tables.sin);
  Tensor k = rotate_pairs(split(key_.forward(normed)), tables.cos, tables.sin);
  Tensor v = split(value_.forward(normed));

  Tensor scores = scale(matmul_nt(q, k), Real(1) / std::sqrt(static_cast<Real>(d)));
  Tensor probs = softmax(scores, -1);
  if (trace != nullptr) {
    trace->probabilities = probs.to_vector();
    trace->heads = h;
    trace->tokens = n;
  }
  Tensor attended = reshape(permute(matmul(probs, v), {1, 0, 2}), {n, c});
  Tensor x = add(tokens, output_.forward(attended));
  return add(x, mlp_.forward(norm2_.forward(x)));
}

TokenGrid AttentionBlock::forward(const TokenGrid& grid) const {
  return TokenGrid{forward(grid.tokens, grid.positions), grid.positions, grid.height, grid.width};
}

AttentionStack::AttentionStack(ParamStore& store, const std::string& prefix, const AttentionConfig& config,
                               std::size_t depth) {
  for (std::size_t i = 0; i < depth; ++i) blocks_.emplace_back(store, prefix + "." + std::to_string(i), config);
}

Tensor AttentionStack::forward(Tensor tokens, std::span<const Pos3> positions) const {
  for (const auto& b : blocks_) tokens = b.forward(tokens, positions);
  return tokens;
}

// ---------------------------------------------------------------------------
// Convolutions

Tensor window_rows_2d(const Tensor& tokens, std::size_t height, std::size_t width, std::size_t stride) {
  return window_rows_3d(tokens, 1, height, width, {1, stride, stride});
}

Tensor window_rows_3d(const Tensor& tokens, std::size_t depth, std::size_t height, std::size_t width,
                      const std::array<std::size_t, 3>& kernel) {
  if (tokens.rank() != 2 || tokens.dim(0) != depth * height * width) {
    throw ShapeError("window gather: token count does not match grid extents");
  }
  const std::size_t c = tokens.dim(1);
  const auto [kd, kh, kw] = kernel;
  const std::size_t od = (depth + kd - 1) / kd;
  const std::size_t oh = (height + kh - 1) / kh;
  const std::size_t ow = (width + kw - 1) / kw;
  const std::size_t row = kd * kh * kw * c;
  auto idx = std::make_shared<std::vector<std::uint32_t>>();
  idx->reserve(od * oh * ow * row);
  for (std::size_t z = 0; z < od; ++z)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x)
        for (std::size_t dz = 0; dz < kd; ++dz) {
          const std::size_t iz = std::min(z * kd + dz, depth - 1);
          for (std::size_t dy = 0; dy < kh; ++dy) {
            const std::size_t iy = std::min(y * kh + dy, height - 1);
            for (std::size_t dx = 0; dx < kw; ++dx) {
              const std::size_t ix = std::min(x * kw + dx, width - 1);
              const std::size_t base = ((iz * height + iy) * width + ix) * c;
              for (std::size_t ch = 0; ch < c; ++ch) idx->push_back(static_cast<std::uint32_t>(base + ch));
            }
          }
        }
  return gather(tokens, idx, {od * oh * ow, row});
}

Conv2dStrided::Conv2dStrided(ParamStore& store, const std::string& prefix, std::size_t in_channels,
                             std::size_t out_channels, std::size_t stride)
    : stride_(stride), in_(in_channels) {
  if (stride != 1 && stride != 2 && stride != 4) {
    throw ConfigError("conv2d stride must be 1, 2 or 4, got " + std::to_string(stride));
  }
  const std::size_t fan_in = stride * stride * in_channels;
  weight_ = store.create(prefix + ".weight", {fan_in, out_channels}, Init::kNormal,
                         Real(1) / std::sqrt(static_cast<Real>(fan_in)));
  bias_ = store.create(prefix + ".bias", {out_channels}, Init::kZeros);
}

Grid2 Conv2dStrided::forward(const Grid2& x) const {
  if (x.tokens.dim(1) != in_) throw ShapeError("conv2d channel mismatch");
  Tensor rows = window_rows_2d(x.tokens, x.height, x.width, stride_);
  return Grid2{add(matmul(rows, weight_), bias_), (x.height + stride_ - 1) / stride_, (x.width + stride_ - 1) / stride_};
}

bool is_supported_kernel(const Kernel3& k) {
  static const Kernel3 allowed[] = {{1, 1, 1}, {1, 2, 2}, {2, 4, 4}, {4, 8, 8}};
  return std::find(std::begin(allowed), std::end(allowed), k) != std::end(allowed);
}

Conv3dStrided::Conv3dStrided(ParamStore& store, const std::string& prefix, std::size_t channels, const Kernel3& kernel)
    : kernel_(kernel), channels_(channels) {
  if (!is_supported_kernel(kernel)) {
    throw ConfigError("conv3d kernel (" + std::to_string(kernel[0]) + "," + std::to_string(kernel[1]) + "," +
                      std::to_string(kernel[2]) + ") is not in the compression schedule");
  }
  const std::size_t fan_in = kernel[0] * kernel[1] * kernel[2] * channels;
  weight_ = store.create(prefix + ".weight", {fan_in, channels}, Init::kNormal,
                         Real(1) / std::sqrt(static_cast<Real>(fan_in)));
  bias_ = store.create(prefix + ".bias", {channels}, Init::kZeros);
}

Grid3 Conv3dStrided::forward(const Grid3& x) const {
  if (x.tokens.dim(1) != channels_) throw ShapeError("conv3d channel mismatch");
  Tensor rows = window_rows_3d(x.tokens, x.depth, x.height, x.width, kernel_);
  return Grid3{add(matmul(rows, weight_), bias_), (x.depth + kernel_[0] - 1) / kernel_[0],
               (x.height + kernel_[1] - 1) / kernel_[1], (x.width + kernel_[2] - 1) / kernel_[2]};
}

PatchEmbed::PatchEmbed(ParamStore& store, const std::string& prefix, std::size_t in_channels, std::size_t patch,
                       std::size_t channels)
    : in_channels_(in_channels), patch_(patch), proj_(store, prefix + ".proj", patch * patch * in_channels, channels) {
  if (patch == 0) throw ConfigError("patch size must be positive");
}

TokenGrid PatchEmbed::forward(const Tensor& image, int t) const {
  if (image.rank() != 3 || image.dim(2) != in_channels_) {
    throw InputError("patch embed expects H x W x " + std::to_string(in_channels_) + " input, got " +
                     shape_str(image.shape()));
  }
  const std::size_t h_img = image.dim(0), w_img = image.dim(1);
  if (h_img % patch_ != 0 || w_img % patch_ != 0) {
    throw InputError("image extents " + std::to_string(h_img) + "x" + std::to_string(w_img) +
                     " are not divisible by patch size " + std::to_string(patch_));
  }
  const std::size_t gh = h_img / patch_, gw = w_img / patch_;
  Tensor flat = reshape(image, {h_img * w_img, in_channels_});
  Tensor rows = window_rows_2d(flat, h_img, w_img, patch_);
  return TokenGrid{proj_.forward(rows), grid_positions(gh, gw, t), gh, gw};
}

}  // namespace mem4d::nn
