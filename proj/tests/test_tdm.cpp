#include <doctest.h>

#include <random>

#include "mem4d/tdm.hpp"
#include "support/fd_oracle.hpp"
#include "support/random.hpp"

using namespace mem4d;
using namespace mem4d::tdm;
using mem4d::testing::random_tensor;
using nn::TokenGrid;

namespace {

TokenGrid grid_of(Tensor tokens, std::size_t h, std::size_t w) {
  return TokenGrid{std::move(tokens), nn::grid_positions(h, w, 0), h, w};
}

TokenGrid random_grid(std::size_t h, std::size_t w, std::size_t c, std::mt19937& rng, bool grad = false) {
  return grid_of(random_tensor({h * w, c}, rng, grad), h, w);
}

// Quadruple loop over (y, x, y', x'), channels summed in order.
std::vector<Real> correlation_oracle(const TokenGrid& a, const TokenGrid& b) {
  const std::size_t h = a.height, w = a.width, c = a.tokens.dim(1);
  std::vector<Real> out(h * w * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t yy = 0; yy < h; ++yy)
        for (std::size_t xx = 0; xx < w; ++xx) {
          Real s = 0;
          for (std::size_t k = 0; k < c; ++k) s += a.tokens.data()[(y * w + x) * c + k] * b.tokens.data()[(yy * w + xx) * c + k];
          out[((y * w + x) * h + yy) * w + xx] = s;
        }
  return out;
}

TdmConfig small_config(std::size_t levels = 2) {
  TdmConfig cfg;
  cfg.memory = 2;
  cfg.pyramid_levels = levels;
  cfg.layers = 1;
  cfg.attention = nn::AttentionConfig{12, 6, 100, 2};
  return cfg;
}

}  // namespace

TEST_CASE("correlation of 1x1 grids is a dot product") {
  auto a = grid_of(Tensor::from({1, 2}, {1, 2}), 1, 1);
  auto b = grid_of(Tensor::from({1, 2}, {3, 4}), 1, 1);
  Tensor v = correlation_volume(a, b);
  CHECK(v.shape() == Shape{1, 1, 1, 1});
  CHECK(v[0] == 11);
  CHECK(correlation_volume(a, b, true)[0] == doctest::Approx(11 / std::sqrt(2.0)).epsilon(1e-15));
}

TEST_CASE("self-correlation diagonal holds squared token norms") {
  std::mt19937 rng(1);
  TokenGrid g = random_grid(3, 2, 5, rng);
  Tensor v = correlation_volume(g, g);
  for (std::size_t i = 0; i < 6; ++i) {
    Real n2 = 0;
    for (std::size_t k = 0; k < 5; ++k) n2 += g.tokens.data()[i * 5 + k] * g.tokens.data()[i * 5 + k];
    CHECK(v.data()[i * 6 + i] == doctest::Approx(n2).epsilon(1e-14));
  }
}

TEST_CASE("correlation volume equals the quadruple-loop oracle exactly") {
  std::mt19937 rng(2);
  for (std::size_t h = 1; h <= 4; ++h)
    for (std::size_t w = 1; w <= 4; ++w)
      for (std::size_t c : {1u, 3u, 8u}) {
        TokenGrid a = random_grid(h, w, c, rng), b = random_grid(h, w, c, rng);
        CHECK(correlation_volume(a, b).to_vector() == correlation_oracle(a, b));
      }
}

TEST_CASE("correlation volume rejects mismatched grids") {
  std::mt19937 rng(3);
  CHECK_THROWS_AS(correlation_volume(random_grid(2, 2, 4, rng), random_grid(2, 3, 4, rng)), ShapeError);
  CHECK_THROWS_AS(correlation_volume(random_grid(2, 2, 4, rng), random_grid(2, 2, 5, rng)), ShapeError);
}

TEST_CASE("shifting the past grid by one patch shifts the volume") {
  // One-hot tokens: token at (y, x) is e_{y*W+x}.
  const std::size_t h = 3, w = 4, c = h * w;
  std::vector<Real> cur(h * w * c, 0), past(h * w * c, 0), shifted(h * w * c, 0);
  for (std::size_t i = 0; i < h * w; ++i) {
    cur[i * c + i] = 1;
    past[i * c + i] = 1;
  }
  // Shift right by one column; the first column repeats.
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t src = y * w + (x == 0 ? 0 : x - 1);
      std::copy_n(past.begin() + src * c, c, shifted.begin() + (y * w + x) * c);
    }
  Tensor v0 = correlation_volume(grid_of(Tensor::from({h * w, c}, cur), h, w), grid_of(Tensor::from({h * w, c}, past), h, w));
  Tensor v1 =
      correlation_volume(grid_of(Tensor::from({h * w, c}, cur), h, w), grid_of(Tensor::from({h * w, c}, shifted), h, w));
  auto at = [&](const Tensor& v, std::size_t y, std::size_t x, std::size_t yy, std::size_t xx) {
    return v.data()[((y * w + x) * h + yy) * w + xx];
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t yy = 0; yy < h; ++yy)
        for (std::size_t xx = 1; xx < w; ++xx) CHECK(at(v1, y, x, yy, xx) == at(v0, y, x, yy, xx - 1));
}

TEST_CASE("correlation pyramid halves the last two extents") {
  std::mt19937 rng(4);
  Tensor vol = correlation_volume(random_grid(4, 4, 3, rng), random_grid(4, 4, 3, rng));
  CHECK(correlation_pyramid(vol, 1).size() == 1);
  auto pyr = correlation_pyramid(vol, 3);
  REQUIRE(pyr.size() == 3);
  CHECK(pyr[0].shape() == Shape{4, 4, 4, 4});
  CHECK(pyr[1].shape() == Shape{4, 4, 2, 2});
  CHECK(pyr[2].shape() == Shape{4, 4, 1, 1});
  for (std::size_t p = 0; p < 16; ++p)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 2; ++x) {
        const Real* l0 = vol.data().data() + p * 16;
        const Real mean = (l0[(2 * y) * 4 + 2 * x] + l0[(2 * y) * 4 + 2 * x + 1] + l0[(2 * y + 1) * 4 + 2 * x] +
                           l0[(2 * y + 1) * 4 + 2 * x + 1]) / 4;
        CHECK(pyr[1].data()[p * 4 + y * 2 + x] == doctest::Approx(mean).epsilon(1e-14));
      }
  CHECK_THROWS_AS(correlation_pyramid(vol, 0), ConfigError);
}

TEST_CASE("motion input length sums the pyramid level extents") {
  CHECK(motion_input_length(1, 1, 1) == 1);
  CHECK(motion_input_length(4, 4, 3) == 16 + 4 + 1);
  CHECK(motion_input_length(6, 8, 3) == 48 + 12 + 4);
  CHECK(motion_input_length(5, 5, 3) == 25 + 9 + 4);
}

TEST_CASE("zero correlation gives zero motion features") {
  nn::ParamStore store(5);
  DynamicsMemoryBuilder tdm(store, "tdm", small_config(3), 4, 4);
  auto pyr = correlation_pyramid(Tensor::zeros({4, 4, 4, 4}), 3);
  Tensor m = tdm.motion_features(pyr);
  CHECK(m.shape() == Shape{16, 12});
  for (Real v : m.data()) CHECK(v == 0);
}

TEST_CASE("entry count is min(t, k_d) for 0-based frame t") {
  nn::ParamStore store(6);
  DynamicsMemoryBuilder tdm(store, "tdm", small_config(), 2, 3);
  std::mt19937 rng(6);
  tca::HistoryWindow recent(2);
  for (long t = 0; t < 6; ++t) {
    TokenGrid cur = random_grid(2, 3, 12, rng);
    TransientDynamicsMemory mem = tdm.build(cur, recent, t);
    CHECK(mem.size() == std::min<std::size_t>(t, 2));
    for (std::size_t i = 0; i < mem.size(); ++i) {
      CHECK(mem.entries[i].distance == static_cast<long>(i) + 1);
      CHECK(mem.entries[i].grid.size() == 6);
      CHECK(mem.entries[i].grid.positions[0].t == -static_cast<int>(i) - 1);
    }
    recent.push(cur, t);
  }
}

TEST_CASE("identical past frames give identical motion entries") {
  nn::ParamStore store(7);
  DynamicsMemoryBuilder tdm(store, "tdm", small_config(), 3, 3);
  std::mt19937 rng(7);
  TokenGrid frame = random_grid(3, 3, 12, rng);
  tca::HistoryWindow recent(2);
  recent.push(frame, 0);
  recent.push(frame, 1);
  TransientDynamicsMemory mem = tdm.build(frame, recent, 2);
  REQUIRE(mem.size() == 2);
  // Every token of one entry shares t, so the time rotation cancels in the
  // scores; only rounding in the rotated vectors differs.
  auto a = mem.entries[0].grid.tokens.to_vector();
  auto b = mem.entries[1].grid.tokens.to_vector();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("k_d caps the entries even when more history is available") {
  nn::ParamStore store(8);
  auto cfg = small_config();
  cfg.memory = 1;
  DynamicsMemoryBuilder tdm(store, "tdm", cfg, 2, 2);
  std::mt19937 rng(8);
  tca::HistoryWindow recent(5);
  for (long f = 0; f < 4; ++f) recent.push(random_grid(2, 2, 12, rng), f);
  CHECK(tdm.build(random_grid(2, 2, 12, rng), recent, 4).size() == 1);
  CHECK_THROWS_AS(tdm.build(random_grid(3, 2, 12, rng), recent, 4), ShapeError);
}

TEST_CASE("gradient check through the dynamics memory on a 2x2 toy") {
  nn::ParamStore store(9);
  DynamicsMemoryBuilder tdm(store, "tdm", small_config(2), 2, 2);
  std::mt19937 rng(9);
  for (auto& t : store.tensors())
    for (auto& v : t.mutable_data()) v += std::uniform_real_distribution<Real>(-0.1, 0.1)(rng);
  TokenGrid cur = random_grid(2, 2, 12, rng, true);
  TokenGrid p1 = random_grid(2, 2, 12, rng, true), p2 = random_grid(2, 2, 12, rng, true);
  tca::HistoryWindow recent(2);
  recent.push(p2, 0);
  recent.push(p1, 1);
  std::mt19937 wrng(5);
  Tensor w1 = random_tensor({4, 12}, wrng, false), w2 = random_tensor({4, 12}, wrng, false);
  auto objective = [&]() {
    auto mem = tdm.build(cur, recent, 2);
    return add(sum(mul(mem.entries[0].grid.tokens, w1)), sum(mul(mem.entries[1].grid.tokens, w2)));
  };
  auto params = store.tensors();
  params.insert(params.end(), {cur.tokens, p1.tokens, p2.tokens});
  auto r = mem4d::testing::check_gradients(objective, params, 8);
  CHECK(r.worst < 1e-3);
}
