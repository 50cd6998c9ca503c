#pragma once

#include <deque>

#include "mem4d/nn.hpp"

namespace mem4d::tca {

/// Stride for a history frame at temporal distance j: 1 below 2, 2 below 4, else 4.
std::size_t stride_schedule(long j);

struct TcaConfig {
  std::size_t window = 5;  // k_t
  std::size_t layers = 4;
  nn::AttentionConfig attention;
};

/// Last k_t encoder grids, newest first.
class HistoryWindow {
 public:
  struct Entry {
    nn::TokenGrid grid;
    long frame = 0;
  };

  explicit HistoryWindow(std::size_t capacity = 5);

  /// Frame indices must strictly increase across pushes.
  void push(nn::TokenGrid grid, long frame);
  void clear() { entries_.clear(); }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t capacity() const { return capacity_; }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  const std::deque<Entry>& entries() const { return entries_; }

 private:
  std::size_t capacity_;
  std::deque<Entry> entries_;
};

struct CompressedHistory {
  nn::TokenGrid grid;  // positions carry t = -j
  long distance = 0;
  std::size_t stride = 1;
};

struct TcaTrace {
  std::size_t attention_tokens = 0;
  std::vector<std::size_t> history_tokens;  // per window entry, newest first
};

class TemporalContextAggregator {
 public:
  TemporalContextAggregator() = default;
  TemporalContextAggregator(nn::ParamStore& store, const std::string& prefix, const TcaConfig& config);

  /// Compresses every window entry relative to current frame index t.
  std::vector<CompressedHistory> compress_history(const HistoryWindow& window, long t) const;

  /// Attends over F_t plus compressed history and returns the F_t slice.
  /// Every window entry must come from a frame before t.
  nn::TokenGrid aggregate(const nn::TokenGrid& current, const HistoryWindow& window, long t,
                          TcaTrace* trace = nullptr) const;

  const TcaConfig& config() const { return config_; }

 private:
  TcaConfig config_;
  nn::Conv2dStrided conv_[3];  // strides 1, 2, 4
  nn::AttentionStack blocks_;
};

}  // namespace mem4d::tca
