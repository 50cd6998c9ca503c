// Acceptance suite: one PASS/FAIL line per criterion. Every tolerance, seed
// and run size is pinned in this file.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "mem4d/cli.hpp"
#include "mem4d/trainer.hpp"
#include "support/fd_oracle.hpp"
#include "support/random.hpp"

using namespace mem4d;
namespace fs = std::filesystem;
using testing::check_gradients;
using testing::random_tensor;

namespace {

constexpr Real kGradTolerance = 1e-3;  // symmetric relative error vs central differences
constexpr double kIdentityTolerance = 1e-10;
constexpr double kUmeyamaTolerance = 1e-8;  // root of the summed squared residual
constexpr double kAlignedAteZero = 1e-12;   // aligned ATE of identical trajectories, rounding only
constexpr double kLearningRatio = 0.5;
constexpr std::size_t kLearningSteps = 2000;
constexpr std::size_t kTrainSequences = 8;
constexpr std::size_t kHeldOut = 2;
constexpr std::size_t kAblationEval = 4;
constexpr std::size_t kProbeFrames = 5;  // stage-1 clip length
constexpr std::uint64_t kTrainSeed = 2024;
constexpr std::uint64_t kEvalSeed = 77;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string num(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

std::string count(std::size_t a, std::size_t b) { return std::to_string(a) + "/" + std::to_string(b); }

scene::Sequence desk_sequence(std::uint64_t base, std::size_t index, std::size_t frames = 8) {
  scene::SceneConfig sc;
  sc.frames = frames;
  return scene::render_sequence(scene::generate_scene(scene::sequence_seed(base, index), sc),
                                "seq_" + std::to_string(index));
}

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

bool same(const decoder::FramePrediction& a, const decoder::FramePrediction& b) {
  return same(a.x_global, b.x_global) && same(a.x_self, b.x_self) && same(a.c_global, b.c_global) &&
         same(a.c_self, b.c_self) && same(a.quaternion, b.quaternion) && same(a.translation, b.translation) &&
         same(a.intrinsics, b.intrinsics);
}

bool same(const Checkpoint& a, const Checkpoint& b) {
  if (a.entries.size() != b.entries.size()) return false;
  for (std::size_t i = 0; i < a.entries.size(); ++i)
    if (a.entries[i].name != b.entries[i].name || a.entries[i].shape != b.entries[i].shape ||
        a.entries[i].values != b.entries[i].values)
      return false;
  return true;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Tensor probe(const Tensor& y, unsigned seed) {
  std::mt19937 rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng, false)));
}

// Moves parameters off their structured initial values (unit gains, zero biases).
void jitter(const nn::ParamStore& store, unsigned seed, Real amount) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<Real> u(-amount, amount);
  for (auto t : store.tensors())
    for (auto& v : t.mutable_data()) v += u(rng);
}

nn::TokenGrid random_grid(std::size_t h, std::size_t w, std::size_t c, std::mt19937& rng, bool grad) {
  return nn::TokenGrid{random_tensor({h * w, c}, rng, grad), nn::grid_positions(h, w, 0), h, w};
}

double mean_of(const std::vector<eval::SequenceMetrics>& m, const std::function<double(const eval::SequenceMetrics&)>& f) {
  double s = 0;
  for (const auto& x : m) s += f(x);
  return s / static_cast<double>(m.size());
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "mem4d");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err, {});
  if (code != 0) std::cerr << err.str();
  return code;
}

// ---------------------------------------------------------------------------

Verdict schedules() {
  // Written out by hand from the piecewise definitions.
  const std::size_t strides[21] = {1, 1, 2, 2, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4};
  const nn::Kernel3 a{1, 1, 1}, b{1, 2, 2}, c{2, 4, 4}, d{4, 8, 8};
  const nn::Kernel3 kernels[21] = {a, a, b, b, c, c, d, d, d, d, d, d, d, d, d, d, d, d, d, d, d};
  std::size_t exact = 0;
  for (long j = 0; j <= 20; ++j) {
    exact += tca::stride_schedule(j) == strides[j];
    exact += psm::compression_kernel(j) == kernels[j];
  }
  return {exact == 42, count(exact, 42) + " table entries exact"};
}

Verdict correlation() {
  std::mt19937 rng(2);
  std::size_t grids = 0, exact = 0;
  for (std::size_t h = 1; h <= 4; ++h)
    for (std::size_t w = 1; w <= 4; ++w)
      for (std::size_t c = 1; c <= 8; ++c) {
        const auto a = random_grid(h, w, c, rng, false), b = random_grid(h, w, c, rng, false);
        const Tensor v = tdm::correlation_volume(a, b);
        bool ok = v.shape() == Shape{h, w, h, w};
        const auto ta = a.tokens.data(), tb = b.tokens.data();
        for (std::size_t y = 0; ok && y < h; ++y)
          for (std::size_t x = 0; x < w; ++x)
            for (std::size_t yy = 0; yy < h; ++yy)
              for (std::size_t xx = 0; xx < w; ++xx) {
                Real s = 0;
                for (std::size_t k = 0; k < c; ++k) s += ta[(y * w + x) * c + k] * tb[(yy * w + xx) * c + k];
                ok = ok && v[((y * w + x) * h + yy) * w + xx] == s;
              }
        ++grids;
        exact += ok;
      }
  return {exact == grids, count(exact, grids) + " grids (h,w <= 4, c <= 8) bit-exact against the loop"};
}

Verdict gradients() {
  std::map<std::string, Real> worst;
  const nn::AttentionConfig attn{12, 6, 100, 2};
  {
    nn::ParamStore store(15);
    nn::AttentionBlock block(store, "blk", attn);
    jitter(store, 10, Real(0.2));
    std::mt19937 rng(10);
    Tensor x = random_tensor({4, 12}, rng);
    const std::vector<nn::Pos3> pos{{0, 0, 0}, {1, 0, 2}, {-2, 1, 1}, {0, 3, -1}};
    auto params = store.tensors();
    params.push_back(x);
    worst["attention"] = check_gradients([&]() { return probe(block.forward(x, pos), 1); }, params, 12).worst;
  }
  {
    nn::ParamStore store(5);
    nn::Conv2dStrided conv(store, "c2", 3, 4, 2);
    jitter(store, 5, Real(0.5));
    std::mt19937 rng(5);
    Tensor x = random_tensor({5 * 6, 3}, rng);
    worst["conv2d"] =
        check_gradients([&]() { return probe(conv.forward({x, 5, 6}).tokens, 2); }, {conv.weight(), conv.bias(), x}, 40)
            .worst;
  }
  {
    nn::ParamStore store(6);
    nn::Conv3dStrided conv(store, "c3", 3, {2, 4, 4});
    jitter(store, 6, Real(0.5));
    std::mt19937 rng(6);
    Tensor x = random_tensor({3 * 5 * 6, 3}, rng);
    worst["conv3d"] = check_gradients([&]() { return probe(conv.forward({x, 3, 5, 6}).tokens, 3); },
                                      {conv.weight(), conv.bias(), x}, 40)
                          .worst;
  }
  {
    nn::ParamStore store(3);
    decoder::PointmapHead head(store, "h", 12, 4);
    std::mt19937 rng(3);
    const auto g = random_grid(2, 2, 12, rng, true);
    auto params = store.tensors();
    params.push_back(g.tokens);
    worst["pointmap_head"] = check_gradients(
                                 [&]() {
                                   auto [x, c] = head.forward(g);
                                   return add(probe(x, 4), probe(c, 5));
                                 },
                                 params, 10)
                                 .worst;
  }
  {
    nn::ParamStore store(6);
    decoder::CameraHead head(store, "cam", 12, 4, 6, 120);
    std::mt19937 rng(6);
    Tensor token = random_tensor({1, 12}, rng);
    auto params = store.tensors();
    params.push_back(token);
    worst["camera_head"] = check_gradients(
                               [&]() {
                                 const auto cam = head.forward(token);
                                 return add(add(probe(cam.quaternion, 6), probe(cam.intrinsics, 7)),
                                            probe(cam.translation, 8));
                               },
                               params, 10)
                               .worst;
  }
  {
    tdm::TdmConfig cfg;
    cfg.memory = 2;
    cfg.pyramid_levels = 2;
    cfg.layers = 1;
    cfg.attention = attn;
    nn::ParamStore store(9);
    tdm::DynamicsMemoryBuilder em(store, "tdm", cfg, 2, 2);
    jitter(store, 9, Real(0.1));
    std::mt19937 rng(9);
    const auto cur = random_grid(2, 2, 12, rng, true);
    const auto p1 = random_grid(2, 2, 12, rng, true), p2 = random_grid(2, 2, 12, rng, true);
    tca::HistoryWindow recent(2);
    recent.push(p2, 0);
    recent.push(p1, 1);
    auto params = store.tensors();
    params.insert(params.end(), {cur.tokens, p1.tokens, p2.tokens});
    worst["E_m"] = check_gradients(
                       [&]() {
                         const auto mem = em.build(cur, recent, 2);
                         return add(probe(mem.entries[0].grid.tokens, 9), probe(mem.entries[1].grid.tokens, 10));
                       },
                       params, 8)
                       .worst;
  }
  {
    psm::PsmConfig cfg;
    cfg.capacity = 4;
    cfg.layers = 1;
    cfg.patch = 2;
    cfg.attention = attn;
    nn::ParamStore store(14);
    psm::StructureEncoder es(store, "es", cfg);
    jitter(store, 14, Real(0.1));
    std::mt19937 rng(14);
    const Tensor pm = random_tensor({4, 4, 3}, rng, false);
    worst["E_s"] = check_gradients([&]() { return probe(es.encode(pm).tokens, 11); }, store.tensors(), 8).worst;
  }
  {
    pipeline::ModelConfig mc;
    mc.image_height = 16;
    mc.image_width = 16;
    mc.patch = 4;
    mc.channels = 12;
    mc.head_dim = 6;
    mc.mlp_ratio = 2;
    mc.encoder_layers = 1;
    mc.tca_window = 3;
    mc.tca_layers = 1;
    mc.pyramid_levels = 2;
    mc.tdm_layers = 1;
    mc.psm_capacity = 4;
    mc.psm_layers = 1;
    mc.readout_stages = 1;
    mc.seed = 3;
    pipeline::Model model(mc);
    scene::SceneConfig sc;
    sc.width = 16;
    sc.height = 16;
    sc.frames = 2;
    const auto seq = pipeline::to_tensors(scene::render_sequence(scene::generate_scene(7, sc), "toy"));
    // The PSM input is a stop-gradient boundary; both the tape and the
    // differences see the same frozen pointmaps.
    std::vector<Tensor> frozen;
    {
      NoGradScope no_grad;
      pipeline::StreamState s(mc);
      for (std::size_t i = 0; i < 2; ++i) frozen.push_back(pipeline::process_frame(model, s, seq.images[i]).x_global.detach());
    }
    auto objective = [&]() {
      pipeline::StreamState s(mc);
      std::vector<decoder::FramePrediction> preds;
      for (std::size_t i = 0; i < 2; ++i)
        preds.push_back(pipeline::process_frame(model, s, seq.images[i], nullptr, &frozen[i]));
      return loss::sequence_loss(preds, seq.truth, loss::LossConfig{}).total;
    };
    // First tensor of every second-level module, so each path is sampled.
    std::vector<Tensor> params;
    std::set<std::string> modules;
    for (const auto& [name, t] : model.params().entries()) {
      const std::string module = name.substr(0, name.find('.', name.find('.') + 1));
      if (modules.insert(module).second) params.push_back(t);
    }
    worst["full_2frame_16x16"] = check_gradients(objective, params, 8, 11).worst;
  }
  Real overall = 0;
  std::string failing;
  for (const auto& [name, w] : worst) {
    if (!(w < kGradTolerance)) failing += " " + name + "=" + num(w);
    overall = std::max(overall, w);
  }
  std::string detail = std::to_string(worst.size()) + " modules, worst relative error " + num(overall) + " (< " +
                       num(kGradTolerance) + ")";
  if (!failing.empty()) detail += "; failing:" + failing;
  return {failing.empty(), detail};
}

Verdict memory_invariants() {
  std::mt19937 rng(3);
  const Tensor token = Tensor::zeros({1, 1});
  std::size_t steps = 0, violations = 0;
  for (std::size_t cap : {1, 2, 3, 7, 16}) {
    psm::PersistentStructureMemory m(cap);
    std::vector<long> pushed;
    long frame = 0, last_evicted = -1;
    for (int step = 0; step < 10000; ++step, ++steps) {
      const auto ev = m.push(nn::TokenGrid{token, {{0, 0, 0}}, 1, 1}, frame);
      pushed.push_back(frame);
      // Reference: the first frame plus the newest cap-1 others, oldest first.
      std::vector<long> expected{pushed.front()};
      const std::size_t keep = std::min(pushed.size() - 1, cap - 1);
      expected.insert(expected.end(), pushed.end() - static_cast<long>(keep), pushed.end());
      std::vector<long> got;
      bool flags_ok = true;
      for (std::size_t i = 0; i < m.size(); ++i) {
        got.push_back(m.entries()[i].frame);
        flags_ok = flags_ok && m.entries()[i].anchor == (i == 0);
      }
      bool ok = got == expected && m.size() <= cap && flags_ok;
      if (ev) {
        ok = ok && *ev > last_evicted && *ev != pushed.front();
        last_evicted = *ev;
      }
      violations += !ok;
      frame += 1 + static_cast<long>(rng() % 3);
    }
  }
  std::size_t law_checks = 0, law_breaks = 0;
  for (std::size_t kd : {1, 2, 3}) {
    tdm::TdmConfig cfg;
    cfg.memory = kd;
    cfg.pyramid_levels = 2;
    cfg.layers = 1;
    cfg.attention = nn::AttentionConfig{12, 6, 100, 2};
    nn::ParamStore store(6);
    tdm::DynamicsMemoryBuilder builder(store, "tdm", cfg, 2, 3);
    tca::HistoryWindow recent(kd);
    for (long t = 0; t < 24; ++t, ++law_checks) {
      const auto cur = random_grid(2, 3, 12, rng, false);
      const auto mem = builder.build(cur, recent, t);
      bool ok = mem.size() == std::min<std::size_t>(static_cast<std::size_t>(t), kd);
      for (std::size_t j = 0; ok && j < mem.size(); ++j) ok = mem.entries[j].distance == static_cast<long>(j + 1);
      law_breaks += !ok;
      recent.push(cur, t);
    }
  }
  return {violations == 0 && law_breaks == 0,
          std::to_string(steps) + " PSM pushes over 5 capacities with " + std::to_string(violations) +
              " violations; TDM count law holds at " + count(law_checks - law_breaks, law_checks) + " (t, k_d)"};
}

Verdict causality() {
  const pipeline::Model model(pipeline::ModelConfig{});
  const auto seq = pipeline::to_tensors(desk_sequence(kEvalSeed, 100, 16));
  std::vector<decoder::FramePrediction> full, prefix;
  pipeline::stream_sequence(model, seq, &full);
  auto head = seq;
  head.images.resize(8);
  head.truth.resize(8);
  pipeline::stream_sequence(model, head, &prefix);
  std::size_t identical = 0;
  for (std::size_t i = 0; i < prefix.size(); ++i) identical += same(prefix[i], full[i]);
  return {full.size() == 16 && identical == 8,
          count(identical, 8) + " prefix frames bit-identical to the 16-frame run (desk model)"};
}

struct LossFixture {
  std::vector<decoder::FramePrediction> pred;
  std::vector<loss::GroundTruthFrame> truth;
};

Tensor tensor_of(const Eigen::Quaterniond& q) { return Tensor::from({4}, {q.w(), q.x(), q.y(), q.z()}); }
Tensor tensor_of(const Eigen::Vector3d& v) { return Tensor::from({3}, {v.x(), v.y(), v.z()}); }

Eigen::Quaterniond random_rotation(std::mt19937& rng) {
  std::normal_distribution<double> n;
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  if (q.w() < 0) q.coeffs() = -q.coeffs();
  return q;
}

Eigen::Vector3d random_vector(std::mt19937& rng) {
  std::uniform_real_distribution<double> u(-2, 2);
  return {u(rng), u(rng), u(rng)};
}

LossFixture random_fixture(std::size_t frames, std::mt19937& rng) {
  LossFixture f;
  const Tensor k = Tensor::from({3, 3}, {50, 0, 32, 0, 50, 24, 0, 0, 1});
  for (std::size_t i = 0; i < frames; ++i) {
    decoder::FramePrediction p;
    p.x_global = random_tensor({3, 4, 3}, rng, false, -2, 2);
    p.x_self = random_tensor({3, 4, 3}, rng, false, -2, 2);
    p.c_global = random_tensor({3, 4}, rng, false, 1.1, 4);
    p.c_self = random_tensor({3, 4}, rng, false, 1.1, 4);
    p.quaternion = tensor_of(random_rotation(rng));
    p.translation = tensor_of(random_vector(rng));
    p.intrinsics = random_tensor({3, 3}, rng, false, 0, 60);
    f.pred.push_back(p);
    Tensor mask = Tensor::full({3, 4}, 1);
    mask.mutable_data()[(i * 5) % 12] = 0;
    f.truth.push_back({random_tensor({3, 4, 3}, rng, false, -2, 2), random_tensor({3, 4, 3}, rng, false, -2, 2), mask, k,
                       tensor_of(random_rotation(rng)), tensor_of(random_vector(rng))});
  }
  return f;
}

Verdict loss_identities() {
  const loss::LossConfig cfg;
  std::mt19937 rng(31);

  // Predictions equal to the truth with unit confidence.
  LossFixture exact = random_fixture(4, rng);
  for (std::size_t i = 0; i < exact.pred.size(); ++i) {
    auto& p = exact.pred[i];
    const auto& g = exact.truth[i];
    p.x_global = g.x_global;
    p.x_self = g.x_self;
    p.c_global = Tensor::full({3, 4}, 1);
    p.c_self = Tensor::full({3, 4}, 1);
    p.quaternion = g.quaternion;
    p.translation = g.translation;
    p.intrinsics = g.intrinsics;
  }
  const auto zero = loss::sequence_loss(exact.pred, exact.truth, cfg);
  const bool zero_ok = zero.conf.item() == 0 && zero.abspose.item() == 0 && zero.relpose.item() == 0 &&
                       zero.total.item() == 0;

  // Right-multiplying every predicted world-to-camera pose by one rigid G.
  double gauge = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const LossFixture f = random_fixture(6, rng);
    const auto pred = loss::poses_of(f.pred), truth = loss::poses_of(f.truth);
    const Eigen::Quaterniond qg = random_rotation(rng);
    const Eigen::Vector3d tg = random_vector(rng);
    std::vector<loss::Pose> moved;
    for (const auto& p : pred) {
      const Eigen::Quaterniond q(p.quaternion[0], p.quaternion[1], p.quaternion[2], p.quaternion[3]);
      const Eigen::Vector3d t(p.translation[0], p.translation[1], p.translation[2]);
      moved.push_back({tensor_of(q * qg), tensor_of(Eigen::Vector3d(t + q * tg)), p.intrinsics});
    }
    gauge = std::max(gauge, std::abs(loss::relative_pose_loss(pred, truth, 1.7).item() -
                                     loss::relative_pose_loss(moved, truth, 1.7).item()));
  }

  // Joint rescaling of predicted and true geometry.
  double equivariance = 0;
  const LossFixture base = random_fixture(4, rng);
  const auto ref = loss::sequence_loss(base.pred, base.truth, cfg);
  for (double k : {0.01, 0.37, 3.0, 250.0}) {
    LossFixture r = base;
    for (auto& p : r.pred) {
      p.x_global = scale(p.x_global, k);
      p.x_self = scale(p.x_self, k);
      p.translation = scale(p.translation, k);
    }
    for (auto& g : r.truth) {
      g.x_global = scale(g.x_global, k);
      g.x_self = scale(g.x_self, k);
      g.translation = scale(g.translation, k);
    }
    const auto parts = loss::sequence_loss(r.pred, r.truth, cfg);
    for (const auto& [a, b] : {std::pair{parts.conf, ref.conf}, std::pair{parts.abspose, ref.abspose},
                               std::pair{parts.relpose, ref.relpose}, std::pair{parts.total, ref.total}})
      equivariance = std::max(equivariance, std::abs(a.item() - b.item()));
  }
  return {zero_ok && gauge < kIdentityTolerance && equivariance < kIdentityTolerance,
          "zero-error loss " + num(zero.total.item()) + ", gauge deviation " + num(gauge) + ", rescale deviation " +
              num(equivariance) + " (< " + num(kIdentityTolerance) + ")"};
}

Verdict alignment() {
  std::mt19937 rng(2);
  std::uniform_real_distribution<double> s(0.2, 5), u(-2, 2);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Eigen::Vector3d> source, target;
    for (int i = 0; i < 8; ++i) source.emplace_back(u(rng), u(rng), u(rng));
    eval::Sim3 truth;
    truth.scale = s(rng);
    truth.rotation = random_rotation(rng).toRotationMatrix();
    truth.translation = random_vector(rng);
    for (const auto& p : source) target.push_back(truth.apply(p));
    const eval::Sim3 fit = eval::umeyama_sim3(source, target);
    worst = std::max({worst, std::sqrt(eval::alignment_residual(fit, source, target)), std::abs(fit.scale - truth.scale),
                      (fit.rotation - truth.rotation).norm(), (fit.translation - truth.translation).norm()});
  }
  eval::Trajectory traj;
  for (int i = 0; i < 8; ++i) traj.push_back({random_rotation(rng), random_vector(rng)});
  const double raw = eval::ate(traj, traj, false), aligned = eval::ate(traj, traj, true);
  return {worst < kUmeyamaTolerance && raw == 0 && aligned < kAlignedAteZero,
          "100 Sim(3) recoveries, worst residual/parameter error " + num(worst) + " (< " + num(kUmeyamaTolerance) +
              "); ATE of identical trajectories " + num(raw) + " raw, " + num(aligned) + " aligned"};
}

Verdict learning() {
  std::vector<pipeline::SequenceTensors> train;
  for (std::size_t i = 0; i < kTrainSequences; ++i) train.push_back(pipeline::to_tensors(desk_sequence(kTrainSeed, i)));
  std::vector<scene::Sequence> held;
  for (std::size_t i = 0; i < kHeldOut; ++i) held.push_back(desk_sequence(kEvalSeed, i));

  pipeline::Model model(pipeline::ModelConfig{});
  pipeline::TrainConfig tc;
  tc.steps = kLearningSteps;
  const auto abs_rel = [](const std::vector<eval::SequenceMetrics>& m) {
    return mean_of(m, [](const eval::SequenceMetrics& x) { return x.per_scene.abs_rel; });
  };
  const double rel0 = abs_rel(pipeline::evaluate_model(model, held));
  const double loss0 = pipeline::probe_loss(model, train, kProbeFrames, tc.loss).total.item();
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = pipeline::train_stage(model, tc, train);
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60;
  const double rel1 = abs_rel(pipeline::evaluate_model(model, held));
  const double loss1 = pipeline::probe_loss(model, train, kProbeFrames, tc.loss).total.item();
  const double rel_ratio = rel1 / rel0, loss_ratio = loss1 / loss0;
  return {rel_ratio < kLearningRatio && loss_ratio < kLearningRatio && result.skipped == 0,
          "held-out AbsRel " + num(rel0) + " -> " + num(rel1) + " (ratio " + num(rel_ratio) + "), probe loss " +
              num(loss0) + " -> " + num(loss1) + " (ratio " + num(loss_ratio) + "), both < " + num(kLearningRatio) +
              "; " + std::to_string(result.skipped) + " skipped steps, " + num(minutes) + " min training"};
}

Verdict ablation(const fs::path& work) {
  const fs::path root = work / "ablation";
  fs::remove_all(root);
  if (run_cli({"generate", "--seqs", std::to_string(kTrainSequences), "--seed", std::to_string(kTrainSeed), "--out",
               (root / "train").string()}) != 0 ||
      run_cli({"generate", "--seqs", std::to_string(kAblationEval), "--seed", std::to_string(kEvalSeed), "--out",
               (root / "eval").string()}) != 0 ||
      run_cli({"ablate", "--data", (root / "train").string(), "--eval-data", (root / "eval").string(), "--out",
               (root / "out").string(), "--variants", "full,no_tdm,no_psm", "--steps", std::to_string(kLearningSteps),
               "--set", "ablate.stage2_steps=0"}) != 0)
    return {false, "ablation run failed"};
  const auto report = nlohmann::json::parse(file_bytes(root / "out" / "ablation.json"));
  std::map<std::string, nlohmann::json> rows;
  for (const auto& r : report.at("rows")) rows[r.at("variant").get<std::string>()] = r;
  const double dyn_full = rows.at("full").at("dynamic_abs_rel"), dyn_no_tdm = rows.at("no_tdm").at("dynamic_abs_rel");
  const double ate_full = rows.at("full").at("ate"), ate_no_psm = rows.at("no_psm").at("ate");
  return {dyn_full <= dyn_no_tdm && ate_full <= ate_no_psm,
          "dynamic AbsRel full " + num(dyn_full) + " vs no_tdm " + num(dyn_no_tdm) + "; ATE full " + num(ate_full) +
              " vs no_psm " + num(ate_no_psm)};
}

Verdict persistence(const fs::path& work) {
  const fs::path root = work / "persistence";
  fs::remove_all(root);
  const std::vector<std::string> common{"--data", (root / "data").string(), "--steps", "12", "--seed", "11"};
  auto train_to = [&](const std::string& name) {
    std::vector<std::string> args{"train", "--out", (root / name).string()};
    args.insert(args.end(), common.begin(), common.end());
    return run_cli(args);
  };
  if (run_cli({"generate", "--seqs", "2", "--seed", "5", "--out", (root / "data").string()}) != 0 ||
      train_to("a") != 0 || train_to("b") != 0)
    return {false, "cli run failed"};
  const std::string bytes_a = file_bytes(root / "a" / "checkpoint.m4ck");
  const bool identical_runs = !bytes_a.empty() && bytes_a == file_bytes(root / "b" / "checkpoint.m4ck") &&
                              file_bytes(root / "a" / "train_log.jsonl") == file_bytes(root / "b" / "train_log.jsonl");

  // The same run in memory, compared with the model reloaded from disk.
  cli::RunConfig cfg;
  cfg.set("train.steps", "12");
  cfg.set("seed", "11");
  pipeline::Model trained(cfg.model(), cfg.wiring());
  std::vector<pipeline::SequenceTensors> data;
  for (const auto& dir : scene::list_sequences(root / "data")) data.push_back(pipeline::to_tensors(scene::read_sequence(dir)));
  const auto result = pipeline::train_stage(trained, cfg.train(), data);
  const auto reloaded = pipeline::model_from_checkpoint(read_checkpoint(root / "a" / "checkpoint.m4ck"));
  const bool same_checkpoint = same(result.checkpoint, read_checkpoint(root / "a" / "checkpoint.m4ck"));
  std::vector<decoder::FramePrediction> from_memory, from_disk;
  pipeline::stream_sequence(trained, data[1], &from_memory);
  pipeline::stream_sequence(*reloaded, data[1], &from_disk);
  std::size_t round_trip = 0;
  for (std::size_t i = 0; i < from_disk.size(); ++i) round_trip += same(from_memory[i], from_disk[i]);

  // Stop after four frames, persist the stream state, resume in a fresh state.
  std::size_t resumed = 0;
  {
    NoGradScope no_grad;
    pipeline::StreamState live(reloaded->config());
    for (std::size_t i = 0; i < 4; ++i) pipeline::process_frame(*reloaded, live, data[1].images[i]);
    write_checkpoint(root / "state.m4ck", pipeline::state_to_checkpoint(live));
    auto restored = pipeline::state_from_checkpoint(read_checkpoint(root / "state.m4ck"), reloaded->config());
    for (std::size_t i = 4; i < data[1].images.size(); ++i)
      resumed += same(pipeline::process_frame(*reloaded, restored, data[1].images[i]), from_disk[i]);
  }
  const std::size_t tail = data[1].images.size() - 4;
  return {identical_runs && same_checkpoint && round_trip == from_disk.size() && resumed == tail,
          std::string("two cmd_train runs ") + (identical_runs ? "byte-identical" : "DIFFER") + ", in-memory checkpoint " +
              (same_checkpoint ? "matches" : "differs") + ", reloaded stream " + count(round_trip, from_disk.size()) +
              " frames bit-identical, resumed stream " + count(resumed, tail)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria, one line each"};
  std::vector<int> selected;
  std::string work = (fs::temp_directory_path() / "mem4d_acceptance").string();
  app.add_option("--criteria", selected, "Criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 10));
  app.add_option("--work", work, "Scratch directory for generated data and runs");
  CLI11_PARSE(app, argc, argv);
  if (selected.empty()) selected = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  fs::create_directories(work);

  const std::map<int, std::pair<std::string, std::function<Verdict()>>> criteria{
      {1, {"schedule exactness", schedules}},
      {2, {"correlation oracle", correlation}},
      {3, {"gradient suite", gradients}},
      {4, {"memory invariants", memory_invariants}},
      {5, {"online causality", causality}},
      {6, {"loss identities", loss_identities}},
      {7, {"alignment recovery", alignment}},
      {8, {"desk-scale learning", learning}},
      {9, {"ablation direction", [&] { return ablation(work); }}},
      {10, {"determinism and persistence", [&] { return persistence(work); }}},
  };
  bool all = true;
  for (int id : selected) {
    const auto& [name, fn] = criteria.at(id);
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    all = all && v.pass;
    std::cout << "criterion " << id << " [" << (v.pass ? "PASS" : "FAIL") << "] " << name << ": " << v.detail << " ["
              << num(secs) << " s]" << std::endl;
  }
  return all ? 0 : 1;
}
