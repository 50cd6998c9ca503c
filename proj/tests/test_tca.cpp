#include <doctest.h>

#include <random>

#include "mem4d/tca.hpp"
#include "support/fd_oracle.hpp"
#include "support/random.hpp"

using namespace mem4d;
using namespace mem4d::tca;
using mem4d::testing::random_tensor;
using nn::TokenGrid;

namespace {

TokenGrid random_grid(std::size_t h, std::size_t w, std::size_t c, std::mt19937& rng, bool grad = false) {
  return TokenGrid{random_tensor({h * w, c}, rng, grad), nn::grid_positions(h, w, 0), h, w};
}

HistoryWindow filled_window(std::size_t k, long t, std::size_t h, std::size_t w, std::size_t c, std::mt19937& rng) {
  HistoryWindow win(k);
  for (long f = std::max(0L, t - static_cast<long>(k)); f < t; ++f) win.push(random_grid(h, w, c, rng), f);
  return win;
}

nn::AttentionConfig small_attention() { return nn::AttentionConfig{12, 6, 100, 2}; }

}  // namespace

TEST_CASE("stride schedule matches the piecewise table on 0..20") {
  for (long j = 0; j <= 20; ++j) {
    const std::size_t expected = j < 2 ? 1 : (j < 4 ? 2 : 4);
    CHECK(stride_schedule(j) == expected);
  }
  CHECK(stride_schedule(1) == 1);
  CHECK(stride_schedule(3) == 2);
  CHECK(stride_schedule(7) == 4);
  CHECK_THROWS_AS(stride_schedule(-1), ArgumentError);
}

TEST_CASE("history window keeps the newest k_t frames, newest first") {
  std::mt19937 rng(1);
  HistoryWindow win(3);
  for (long f = 0; f < 7; ++f) {
    win.push(random_grid(2, 2, 4, rng), f);
    CHECK(win.size() == std::min<std::size_t>(f + 1, 3));
    for (std::size_t i = 0; i < win.size(); ++i) CHECK(win[i].frame == f - static_cast<long>(i));
  }
  CHECK_THROWS_AS(win.push(random_grid(2, 2, 4, rng), 6), ArgumentError);
  CHECK_THROWS_AS(HistoryWindow(0), ConfigError);
}

TEST_CASE("compressed history extents follow the stride schedule") {
  nn::ParamStore store(2);
  TemporalContextAggregator tca(store, "tca", TcaConfig{5, 1, nn::AttentionConfig{}});
  std::mt19937 rng(2);

  HistoryWindow one(5);
  one.push(random_grid(8, 8, 48, rng), 4);
  auto c1 = tca.compress_history(one, 5);
  REQUIRE(c1.size() == 1);
  CHECK(c1[0].grid.height == 8);
  CHECK(c1[0].grid.width == 8);

  HistoryWindow far(5);
  far.push(random_grid(8, 8, 48, rng), 1);
  auto c4 = tca.compress_history(far, 5);
  CHECK(c4[0].stride == 4);
  CHECK(c4[0].grid.height == 2);
  CHECK(c4[0].grid.width == 2);

  CHECK(tca.compress_history(HistoryWindow(5), 0).empty());
}

TEST_CASE("compressed tokens sit at window centres with t = -j") {
  nn::ParamStore store(3);
  TemporalContextAggregator tca(store, "tca", TcaConfig{5, 1, small_attention()});
  std::mt19937 rng(3);
  HistoryWindow win = filled_window(5, 5, 8, 8, 12, rng);
  auto hist = tca.compress_history(win, 5);
  REQUIRE(hist.size() == 5);
  // j=2, stride 2: output (1, 3) covers rows 2..3 and columns 6..7.
  CHECK(hist[1].distance == 2);
  CHECK(hist[1].grid.positions[1 * 4 + 3] == nn::Pos3{-2, 2, 6});
  // j=5, stride 4: output (1, 1) covers rows/columns 4..7.
  CHECK(hist[4].grid.positions[3] == nn::Pos3{-5, 5, 5});
  for (const auto& h : hist)
    for (const auto& p : h.grid.positions) CHECK(p.t == -h.distance);
}

TEST_CASE("full window on an 8x8 grid feeds 168 tokens to attention") {
  // Strides for j = 1..5 are 1, 2, 2, 4, 4.
  nn::ParamStore store(4);
  TemporalContextAggregator tca(store, "tca", TcaConfig{5, 1, small_attention()});
  std::mt19937 rng(4);
  HistoryWindow win = filled_window(5, 9, 8, 8, 12, rng);
  TcaTrace trace;
  TokenGrid out = tca.aggregate(random_grid(8, 8, 12, rng), win, 9, &trace);
  CHECK(trace.attention_tokens == 64 + 64 + 16 + 16 + 4 + 4);
  CHECK(trace.history_tokens == std::vector<std::size_t>{64, 16, 16, 4, 4});
  CHECK(out.size() == 64);
}

TEST_CASE("history token count is non-increasing in temporal distance") {
  nn::ParamStore store(5);
  TemporalContextAggregator tca(store, "tca", TcaConfig{12, 1, small_attention()});
  std::mt19937 rng(5);
  for (std::size_t h : {3u, 5u, 6u, 8u}) {
    HistoryWindow win = filled_window(12, 12, h, h + 1, 12, rng);
    auto hist = tca.compress_history(win, 12);
    for (std::size_t i = 1; i < hist.size(); ++i) CHECK(hist[i].grid.size() <= hist[i - 1].grid.size());
  }
}

TEST_CASE("aggregate returns exactly the current frame's tokens") {
  nn::ParamStore store(6);
  TemporalContextAggregator tca(store, "tca", TcaConfig{5, 2, small_attention()});
  std::mt19937 rng(6);
  for (long t = 0; t < 8; ++t) {
    HistoryWindow win = filled_window(5, t, 3, 4, 12, rng);
    TokenGrid cur = random_grid(3, 4, 12, rng);
    TokenGrid out = tca.aggregate(cur, win, t);
    CHECK(out.size() == cur.size());
    CHECK(out.tokens.shape() == cur.tokens.shape());
    CHECK(out.positions == cur.positions);
  }
}

TEST_CASE("empty window reduces to plain self-attention over F_t") {
  nn::ParamStore store(7), twin(7);
  TemporalContextAggregator tca(store, "tca", TcaConfig{5, 2, small_attention()});
  // Same seed and names give the same weights.
  nn::AttentionStack reference(twin, "tca.attn", small_attention(), 2);
  std::mt19937 rng(7);
  TokenGrid cur = random_grid(3, 3, 12, rng);
  TokenGrid out = tca.aggregate(cur, HistoryWindow(5), 0);
  CHECK(out.tokens.to_vector() == reference.forward(cur.tokens, cur.positions).to_vector());
}

TEST_CASE("history changes the output and the result is deterministic") {
  nn::ParamStore store(8);
  TemporalContextAggregator tca(store, "tca", TcaConfig{5, 2, small_attention()});
  std::mt19937 rng(8);
  TokenGrid cur = random_grid(4, 4, 12, rng);
  HistoryWindow win = filled_window(5, 3, 4, 4, 12, rng);
  const auto a = tca.aggregate(cur, win, 3).tokens.to_vector();
  const auto b = tca.aggregate(cur, win, 3).tokens.to_vector();
  CHECK(a == b);
  CHECK(a != tca.aggregate(cur, HistoryWindow(5), 3).tokens.to_vector());
}

TEST_CASE("aggregate refuses history from the current or a later frame") {
  nn::ParamStore store(9);
  TemporalContextAggregator tca(store, "tca", TcaConfig{5, 1, small_attention()});
  std::mt19937 rng(9);
  HistoryWindow win(5);
  win.push(random_grid(2, 2, 12, rng), 3);
  CHECK_THROWS_AS(tca.aggregate(random_grid(2, 2, 12, rng), win, 3), ArgumentError);
  CHECK_THROWS_AS(tca.aggregate(random_grid(2, 3, 12, rng), win, 4), ShapeError);
  CHECK_THROWS_AS(tca.aggregate(random_grid(2, 2, 6, rng), HistoryWindow(5), 4), ShapeError);
}

TEST_CASE("gradient check through aggregate") {
  nn::ParamStore store(10);
  TemporalContextAggregator tca(store, "tca", TcaConfig{3, 1, small_attention()});
  std::mt19937 rng(10);
  for (auto& t : store.tensors())
    for (auto& v : t.mutable_data()) v += std::uniform_real_distribution<Real>(-0.1, 0.1)(rng);
  HistoryWindow win(3);
  std::vector<Tensor> inputs;
  for (long f = 0; f < 3; ++f) {
    TokenGrid g = random_grid(4, 4, 12, rng, true);
    inputs.push_back(g.tokens);
    win.push(g, f);
  }
  TokenGrid cur = random_grid(4, 4, 12, rng, true);
  std::mt19937 wrng(77);
  Tensor w = random_tensor({16, 12}, wrng, false);
  auto params = store.tensors();
  params.push_back(cur.tokens);
  params.insert(params.end(), inputs.begin(), inputs.end());
  auto r = mem4d::testing::check_gradients([&]() { return sum(mul(tca.aggregate(cur, win, 3).tokens, w)); }, params, 6);
  CHECK(r.worst < 1e-3);
}
