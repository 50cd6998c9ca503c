#pragma once

#include <optional>

#include "mem4d/nn.hpp"

namespace mem4d::psm {

/// Readout compression kernel for an entry at temporal distance d.
nn::Kernel3 compression_kernel(long d);

struct PsmConfig {
  std::size_t capacity = 16;  // k_s, anchor included
  std::size_t layers = 4;     // E_s depth
  std::size_t patch = 8;
  nn::AttentionConfig attention;  // channels = C_s
};

struct PsmEntry {
  nn::TokenGrid features;
  long frame = 0;
  bool anchor = false;
};

/// FIFO bank whose first entry is pinned. Entries are ordered oldest first;
/// the anchor, once present, is entries()[0].
class PersistentStructureMemory {
 public:
  explicit PersistentStructureMemory(std::size_t capacity = 16);

  /// Appends an entry (anchor iff the bank was empty), evicts the oldest
  /// non-anchor entry when over capacity and returns its frame.
  std::optional<long> push(nn::TokenGrid features, long frame);

  /// Rebuilds a bank from serialized entries, checking every invariant.
  static PersistentStructureMemory restore(std::size_t capacity, std::vector<PsmEntry> entries);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t capacity() const { return capacity_; }
  const std::vector<PsmEntry>& entries() const { return entries_; }
  const PsmEntry& anchor() const;

 private:
  std::size_t capacity_;
  std::vector<PsmEntry> entries_;
};

/// E_s: patch-embedded pointmap through a small attention stack.
class StructureEncoder {
 public:
  StructureEncoder() = default;
  StructureEncoder(nn::ParamStore& store, const std::string& prefix, const PsmConfig& config);

  /// pointmap: H_img x W_img x 3, treated as a constant (no gradient to it).
  nn::TokenGrid encode(const Tensor& pointmap) const;

 private:
  nn::PatchEmbed embed_;
  nn::AttentionStack blocks_;
};

struct CompressedSlot {
  long first_frame = 0;
  long last_frame = 0;
  nn::Kernel3 kernel{1, 1, 1};
  std::size_t tokens = 0;
};

struct CompressedBank {
  nn::TokenGrid grid;  // token list, positions (origin frame, y, x); extents unused
  std::vector<CompressedSlot> slots;
};

class StructureCompressor {
 public:
  StructureCompressor() = default;
  StructureCompressor(nn::ParamStore& store, const std::string& prefix, std::size_t channels);

  /// Anchor passes through untouched. Other entries are grouped into runs
  /// sharing a kernel; each run is stacked along time and convolved, so a
  /// kernel with temporal extent k covers consecutive groups of k entries.
  CompressedBank compress(const PersistentStructureMemory& memory, long t) const;

 private:
  const nn::Conv3dStrided& conv_for(const nn::Kernel3& k) const;
  nn::Conv3dStrided conv_[4];  // (1,1,1), (1,2,2), (2,4,4), (4,8,8)
};

}  // namespace mem4d::psm
