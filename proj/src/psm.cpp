#include "mem4d/psm.hpp"

#include <algorithm>
#include <cmath>

namespace mem4d::psm {

using nn::Kernel3;
using nn::Pos3;
using nn::TokenGrid;

namespace {

constexpr Kernel3 kKernels[4] = {{1, 1, 1}, {1, 2, 2}, {2, 4, 4}, {4, 8, 8}};

}  // namespace

Kernel3 compression_kernel(long d) {
  if (d < 0) throw ArgumentError("temporal distance must be non-negative, got " + std::to_string(d));
  if (d >= 6) return kKernels[3];
  if (d >= 4) return kKernels[2];
  if (d >= 2) return kKernels[1];
  return kKernels[0];
}

PersistentStructureMemory::PersistentStructureMemory(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("PSM capacity k_s must be at least 1");
}

std::optional<long> PersistentStructureMemory::push(TokenGrid features, long frame) {
  if (!entries_.empty()) {
    if (frame <= entries_.back().frame) {
      throw ArgumentError("PSM push of frame " + std::to_string(frame) + " after frame " +
                          std::to_string(entries_.back().frame));
    }
    const auto& a = entries_.front().features;
    if (features.height != a.height || features.width != a.width || features.tokens.dim(1) != a.tokens.dim(1)) {
      throw ShapeError("PSM entry extents differ from the anchor");
    }
  }
  const bool anchor = entries_.empty();
  entries_.push_back(PsmEntry{std::move(features), frame, anchor});
  if (entries_.size() <= capacity_) return std::nullopt;
  // Capacity 1 holds the anchor alone; the newcomer is dropped.
  const std::size_t victim = 1 < entries_.size() ? 1 : 0;
  const long evicted = entries_[victim].frame;
  entries_.erase(entries_.begin() + victim);
  return evicted;
}

PersistentStructureMemory PersistentStructureMemory::restore(std::size_t capacity, std::vector<PsmEntry> entries) {
  PersistentStructureMemory mem(capacity);
  if (entries.size() > capacity) throw IoError("stored PSM exceeds its capacity");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].anchor != (i == 0)) throw IoError("stored PSM must have exactly one anchor, first");
    if (i > 0 && entries[i].frame <= entries[i - 1].frame) throw IoError("stored PSM frames are not increasing");
  }
  mem.entries_ = std::move(entries);
  return mem;
}

const PsmEntry& PersistentStructureMemory::anchor() const {
  if (entries_.empty()) throw ArgumentError("PSM is empty");
  return entries_.front();
}

StructureEncoder::StructureEncoder(nn::ParamStore& store, const std::string& prefix, const PsmConfig& config)
    : embed_(store, prefix + ".embed", 3, config.patch, config.attention.channels),
      blocks_(store, prefix + ".blocks", config.attention, config.layers) {}

TokenGrid StructureEncoder::encode(const Tensor& pointmap) const {
  for (Real v : pointmap.data()) {
    if (!std::isfinite(v)) throw InputError("structure encoder received a non-finite pointmap");
  }
  // Every token of one entry shares its frame, so encoding at t = 0 is
  // equivalent to encoding at the origin frame and keeps entries comparable.
  TokenGrid g = embed_.forward(pointmap.detach(), 0);
  return TokenGrid{blocks_.forward(g.tokens, g.positions), g.positions, g.height, g.width};
}

StructureCompressor::StructureCompressor(nn::ParamStore& store, const std::string& prefix, std::size_t channels) {
  for (int i = 0; i < 4; ++i) {
    const auto& k = kKernels[i];
    conv_[i] = nn::Conv3dStrided(
        store, prefix + ".conv_" + std::to_string(k[0]) + std::to_string(k[1]) + std::to_string(k[2]), channels, k);
  }
}

const nn::Conv3dStrided& StructureCompressor::conv_for(const Kernel3& k) const {
  for (int i = 0; i < 4; ++i)
    if (kKernels[i] == k) return conv_[i];
  throw ConfigError("no convolution for this kernel");
}

CompressedBank StructureCompressor::compress(const PersistentStructureMemory& memory, long t) const {
  if (memory.empty()) throw ArgumentError("cannot compress an empty PSM");
  const auto& entries = memory.entries();
  const PsmEntry& anchor = entries.front();
  const std::size_t h = anchor.features.height, w = anchor.features.width;

  CompressedBank bank;
  std::vector<Tensor> parts{anchor.features.tokens};
  std::vector<Pos3> positions;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) positions.push_back({static_cast<int>(anchor.frame), int(y), int(x)});
  bank.slots.push_back({anchor.frame, anchor.frame, {1, 1, 1}, h * w});

  std::size_t i = 1;
  while (i < entries.size()) {
    const long d0 = t - entries[i].frame;
    if (d0 < 0) throw ArgumentError("PSM holds frame " + std::to_string(entries[i].frame) + " after frame " + std::to_string(t));
    const Kernel3 k = compression_kernel(d0);
    std::size_t end = i + 1;
    while (end < entries.size() && compression_kernel(t - entries[end].frame) == k) ++end;

    std::vector<Tensor> run;
    for (std::size_t r = i; r < end; ++r) run.push_back(entries[r].features.tokens);
    const std::size_t depth = end - i;
    nn::Grid3 out = conv_for(k).forward({run.size() == 1 ? run.front() : concat(run, 0), depth, h, w});
    parts.push_back(out.tokens);

    for (std::size_t z = 0; z < out.depth; ++z) {
      const std::size_t first = i + std::min(z * k[0], depth - 1);
      const std::size_t last = i + std::min(z * k[0] + k[0] - 1, depth - 1);
      const std::size_t centre = i + std::min(z * k[0] + (k[0] - 1) / 2, depth - 1);
      const int tf = static_cast<int>(entries[centre].frame);
      for (std::size_t y = 0; y < out.height; ++y)
        for (std::size_t x = 0; x < out.width; ++x) {
          const int py = static_cast<int>(std::min(y * k[1] + (k[1] - 1) / 2, h - 1));
          const int px = static_cast<int>(std::min(x * k[2] + (k[2] - 1) / 2, w - 1));
          positions.push_back({tf, py, px});
        }
      bank.slots.push_back({entries[first].frame, entries[last].frame, k, out.height * out.width});
    }
    i = end;
  }
  Tensor tokens = parts.size() == 1 ? parts.front() : concat(parts, 0);
  bank.grid = TokenGrid{tokens, std::move(positions), 0, 0};
  return bank;
}

}  // namespace mem4d::psm
