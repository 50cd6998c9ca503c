#include "mem4d/tca.hpp"

#include <algorithm>

namespace mem4d::tca {

using nn::Pos3;
using nn::TokenGrid;

std::size_t stride_schedule(long j) {
  if (j < 0) throw ArgumentError("temporal distance must be non-negative, got " + std::to_string(j));
  if (j < 2) return 1;
  if (j < 4) return 2;
  return 4;
}

HistoryWindow::HistoryWindow(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("history window needs k_t >= 1");
}

void HistoryWindow::push(TokenGrid grid, long frame) {
  if (!entries_.empty() && frame <= entries_.front().frame) {
    throw ArgumentError("history frames must arrive in increasing order");
  }
  entries_.push_front(Entry{std::move(grid), frame});
  while (entries_.size() > capacity_) entries_.pop_back();
}

TemporalContextAggregator::TemporalContextAggregator(nn::ParamStore& store, const std::string& prefix,
                                                     const TcaConfig& config)
    : config_(config) {
  if (config.layers == 0) throw ConfigError("TCA needs at least one attention layer");
  const std::size_t c = config.attention.channels;
  const std::size_t strides[3] = {1, 2, 4};
  for (int i = 0; i < 3; ++i) {
    conv_[i] = nn::Conv2dStrided(store, prefix + ".conv_s" + std::to_string(strides[i]), c, c, strides[i]);
  }
  blocks_ = nn::AttentionStack(store, prefix + ".attn", config.attention, config.layers);
}

std::vector<CompressedHistory> TemporalContextAggregator::compress_history(const HistoryWindow& window, long t) const {
  std::vector<CompressedHistory> out;
  out.reserve(window.size());
  for (const auto& e : window.entries()) {
    const long j = t - e.frame;
    if (j <= 0) throw ArgumentError("history entry from frame " + std::to_string(e.frame) + " is not before frame " +
                                    std::to_string(t));
    const std::size_t s = stride_schedule(j);
    const auto& conv = conv_[s == 1 ? 0 : s == 2 ? 1 : 2];
    nn::Grid2 g = conv.forward({e.grid.tokens, e.grid.height, e.grid.width});
    std::vector<Pos3> pos;
    pos.reserve(g.height * g.width);
    const int centre = static_cast<int>((s - 1) / 2);
    for (std::size_t y = 0; y < g.height; ++y)
      for (std::size_t x = 0; x < g.width; ++x) {
        const int py = std::min(static_cast<int>(y * s) + centre, static_cast<int>(e.grid.height) - 1);
        const int px = std::min(static_cast<int>(x * s) + centre, static_cast<int>(e.grid.width) - 1);
        pos.push_back({static_cast<int>(-j), py, px});
      }
    out.push_back({TokenGrid{g.tokens, std::move(pos), g.height, g.width}, j, s});
  }
  return out;
}

TokenGrid TemporalContextAggregator::aggregate(const TokenGrid& current, const HistoryWindow& window, long t,
                                               TcaTrace* trace) const {
  const std::size_t c = config_.attention.channels;
  if (current.tokens.rank() != 2 || current.tokens.dim(1) != c) {
    throw ShapeError("TCA expects " + std::to_string(c) + "-channel tokens, got " + shape_str(current.tokens.shape()));
  }
  for (const auto& e : window.entries()) {
    if (e.grid.height != current.height || e.grid.width != current.width || e.grid.tokens.dim(1) != c) {
      throw ShapeError("TCA history grid does not match the current grid");
    }
  }
  const auto history = compress_history(window, t);
  std::vector<Tensor> parts{current.tokens};
  std::vector<Pos3> positions = nn::grid_positions(current.height, current.width, 0);
  if (trace != nullptr) trace->history_tokens.clear();
  for (const auto& h : history) {
    parts.push_back(h.grid.tokens);
    positions.insert(positions.end(), h.grid.positions.begin(), h.grid.positions.end());
    if (trace != nullptr) trace->history_tokens.push_back(h.grid.size());
  }
  if (trace != nullptr) trace->attention_tokens = positions.size();
  Tensor joint = parts.size() == 1 ? current.tokens : concat(parts, 0);
  Tensor refined = blocks_.forward(joint, positions);
  const std::size_t n = current.size();
  return TokenGrid{parts.size() == 1 ? refined : slice(refined, 0, 0, n), current.positions, current.height,
                   current.width};
}

}  // namespace mem4d::tca
