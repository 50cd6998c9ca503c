#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mem4d/cli.hpp"

using namespace mem4d;
using namespace mem4d::cli;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kToyModel{"model.image_width=16", "model.image_height=16", "model.patch=4",
                                         "model.channels=12",    "model.head_dim=6",      "model.mlp_ratio=2",
                                         "model.encoder_layers=1", "model.tca_layers=1",  "model.tdm_layers=1",
                                         "model.psm_layers=1",   "model.readout_stages=1", "model.pyramid_levels=2",
                                         "model.psm_capacity=4"};

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run_cli(std::vector<std::string> args, const std::map<std::string, std::string>& env = {}) {
  args.insert(args.begin(), "mem4d");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run(static_cast<int>(argv.size()), argv.data(), out, err, env);
  return {code, out.str(), err.str()};
}

std::vector<std::string> with_toy(std::vector<std::string> args) {
  args.push_back("--set");
  args.insert(args.end(), kToyModel.begin(), kToyModel.end());
  return args;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mem4d_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Toy dataset at 16x16 shared by the command tests.
fs::path toy_dataset(const std::string& name, std::size_t seqs, std::size_t frames, std::uint64_t seed = 1) {
  const auto root = scratch(name);
  const auto r = run_cli({"generate", "--out", (root / "data").string(), "--seqs", std::to_string(seqs), "--frames",
                          std::to_string(frames), "--seed", std::to_string(seed), "--set", "data.width=16",
                          "data.height=16"});
  REQUIRE(r.code == 0);
  return root / "data";
}

}  // namespace

TEST_CASE("run config: defaults, typed parsing and unknown keys") {
  RunConfig c;
  CHECK(c.uns("train.steps") == 2000);
  CHECK(c.real("loss.alpha") == doctest::Approx(0.2));
  CHECK(c.flag("loss.use_relpose"));
  CHECK(c.variants() == pipeline::default_variants());
  CHECK_THROWS_AS(c.set("train.stepz", "1"), ConfigError);
  CHECK_THROWS_AS(c.set("train.steps", "-1"), ConfigError);
  CHECK_THROWS_AS(c.set("train.steps", "1.5"), ConfigError);
  CHECK_THROWS_AS(c.set("loss.alpha", "nan"), ConfigError);
  CHECK_THROWS_AS(c.set("loss.use_relpose", "maybe"), ConfigError);
  CHECK_THROWS_AS(c.set_assignment("train.steps"), ConfigError);
  c.set("eval.alignment", "affine");
  CHECK_THROWS_AS(c.evaluation(), ConfigError);
  c.set("ablate.variants", "full,no_magic");
  CHECK_THROWS_AS(c.variants(), ConfigError);
  CHECK(RunConfig::env_name("train.stage2_min") == "MEM4D_TRAIN_STAGE2_MIN");
}

TEST_CASE("run config: dump round-trips through a config file") {
  RunConfig a;
  a.set("train.steps", "17");
  a.set("paths.out", "/tmp/somewhere");
  a.set("loss.use_relpose", "false");
  const auto dir = scratch("dump");
  std::ofstream(dir / "c.cfg") << "# comment\n\n" << a.dump();
  RunConfig b;
  b.load_file(dir / "c.cfg");
  CHECK(b.dump() == a.dump());
  std::ofstream(dir / "bad.cfg") << "train.steps=3\nmodel.wings=2\n";
  try {
    b.load_file(dir / "bad.cfg");
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("bad.cfg:2") != std::string::npos);
    CHECK(std::string(e.what()).find("model.wings") != std::string::npos);
  }
}

TEST_CASE("precedence: defaults < file < environment < --set < flags") {
  const auto dir = scratch("precedence");
  std::ofstream(dir / "c.cfg") << "data.sequences=5\ndata.frames=4\ndata.width=16\ndata.height=16\nseed=9\n";
  const std::map<std::string, std::string> env{{"MEM4D_DATA_FRAMES", "3"}, {"MEM4D_SEED", "8"}, {"HOME", "/x"}};
  const auto r = run_cli({"generate", "--config", (dir / "c.cfg").string(), "--out", (dir / "d").string(), "--set",
                          "data.sequences=2", "seed=7", "--seqs", "1"},
                         env);
  REQUIRE(r.code == 0);
  RunConfig echoed;
  echoed.load_file(dir / "d" / "config.resolved");
  CHECK(echoed.uns("data.sequences") == 1);  // flag beats --set beats file
  CHECK(echoed.uns("data.frames") == 3);     // environment beats file
  CHECK(echoed.uns("seed") == 7);            // --set beats environment
  CHECK(scene::list_sequences(dir / "d").size() == 1);
  CHECK(scene::read_sequence(dir / "d" / "seq_000").frames.size() == 3);

  const auto bad = run_cli({"generate", "--out", (dir / "e").string()}, {{"MEM4D_TRAIN_STEPZ", "1"}});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("MEM4D_TRAIN_STEPZ") != std::string::npos);
  CHECK(run_cli({"generate", "--out", (dir / "f").string(), "--set", "nope=1"}).code == 2);
}

TEST_CASE("generate: counting, determinism and a missing output path") {
  const auto a = toy_dataset("gen_a", 2, 8, 4);
  const auto b = toy_dataset("gen_b", 2, 8, 4);
  const auto seqs = scene::list_sequences(a);
  REQUIRE(seqs.size() == 2);
  for (const auto& s : seqs) {
    CHECK(scene::read_sequence(s).frames.size() == 8);
    for (const auto& f : fs::directory_iterator(s)) CHECK(slurp(f.path()) == slurp(b / s.filename() / f.path().filename()));
  }
  const auto r = run_cli({"generate", "--seqs", "2"});
  CHECK(r.code != 0);
  CHECK(r.err.find("--out") != std::string::npos);
  CHECK(run_cli({"frobnicate"}).code == 2);
}

TEST_CASE("train: zero steps, log schema and the stage-2 contract") {
  const auto data = toy_dataset("train_data", 2, 6);
  const auto root = scratch("train");
  auto r = run_cli(with_toy({"train", "--data", data.string(), "--out", (root / "zero").string(), "--steps", "0"}));
  REQUIRE(r.code == 0);
  RunConfig cfg;
  for (const auto& a : kToyModel) cfg.set_assignment(a);
  pipeline::Model init(cfg.model());
  const Checkpoint ckpt = read_checkpoint(root / "zero" / "checkpoint.m4ck");
  for (const auto& [name, t] : init.params().entries()) {
    const auto& e = ckpt.at("param/" + name);
    CHECK(std::equal(e.values.begin(), e.values.end(), t.data().begin()));
  }
  CHECK(fs::exists(root / "zero" / "config.resolved"));

  r = run_cli(with_toy({"train", "--data", data.string(), "--out", (root / "s1").string(), "--steps", "3", "--set",
                        "train.clip_length=3"}));
  REQUIRE(r.code == 0);
  std::ifstream log(root / "s1" / "train_log.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(log, line); ++lines) {
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"step", "L_conf", "L_abspose", "L_relpose", "total", "lr"}) CHECK(j.contains(k));
  }
  CHECK(lines == 3);

  r = run_cli({"train", "--data", data.string(), "--out", (root / "s2").string(), "--stage", "2"});
  CHECK(r.code == 2);
  CHECK(r.err.find("--init-from") != std::string::npos);
  r = run_cli({"train", "--data", data.string(), "--out", (root / "s2").string(), "--stage", "2", "--steps", "2",
               "--init-from", (root / "s1" / "checkpoint.m4ck").string(), "--set", "train.stage2_min=3",
               "train.stage2_max=6"});
  CHECK(r.code == 0);
  const Checkpoint s2 = read_checkpoint(root / "s2" / "checkpoint.m4ck");
  CHECK(s2.meta.at("train").at("stage") == 2);
  CHECK(s2.meta.at("model") == ckpt.meta.at("model"));
}

TEST_CASE("fixed-seed training runs produce identical checkpoints") {
  const auto data = toy_dataset("det_data", 2, 6);
  const auto root = scratch("det");
  for (const char* run : {"a", "b"}) {
    REQUIRE(run_cli(with_toy({"train", "--data", data.string(), "--out", (root / run).string(), "--steps", "3", "--seed",
                              "5", "--set", "train.clip_length=4"}))
                .code == 0);
  }
  CHECK(slurp(root / "a" / "checkpoint.m4ck") == slurp(root / "b" / "checkpoint.m4ck"));
  CHECK(slurp(root / "a" / "train_log.jsonl") == slurp(root / "b" / "train_log.jsonl"));
}

TEST_CASE("stream: prediction records, fused and per-frame PLY, corrupt checkpoints") {
  const auto data = toy_dataset("stream_data", 1, 8);
  const auto root = scratch("stream");
  REQUIRE(run_cli(with_toy({"train", "--data", data.string(), "--out", (root / "m").string(), "--steps", "0"})).code == 0);
  const auto ckpt = root / "m" / "checkpoint.m4ck";
  const auto seq = data / "seq_000";

  auto r = run_cli({"stream", "--checkpoint", ckpt.string(), "--sequence", seq.string(), "--out", (root / "p").string()});
  REQUIRE(r.code == 0);
  const auto pred = eval::read_predictions(root / "p");
  CHECK(pred.poses.size() == 8);
  CHECK(pred.x_global.size() == 8);
  std::size_t ply = 0;
  for (const auto& f : fs::directory_iterator(root / "p")) ply += f.path().extension() == ".ply";
  CHECK(ply == 1);
  std::ifstream fused(root / "p" / "fused.ply");
  std::string line;
  std::getline(fused, line);
  CHECK(line == "ply");
  std::getline(fused, line);
  std::getline(fused, line);
  CHECK(line == "element vertex " + std::to_string(8 * 16 * 16));

  r = run_cli({"stream", "--checkpoint", ckpt.string(), "--sequence", seq.string(), "--out", (root / "q").string(),
               "--export-per-frame"});
  REQUIRE(r.code == 0);
  for (int i = 0; i < 8; ++i) CHECK(fs::exists(root / "q" / ("frame_000" + std::to_string(i) + ".ply")));

  // Flip one byte in the middle of the payload.
  std::string bytes = slurp(ckpt);
  bytes[bytes.size() / 2] ^= 0x40;
  std::ofstream(root / "bad.m4ck", std::ios::binary) << bytes;
  r = run_cli({"stream", "--checkpoint", (root / "bad.m4ck").string(), "--sequence", seq.string(), "--out",
               (root / "x").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("error:") != std::string::npos);
  CHECK(!fs::exists(root / "x" / "predictions.json"));
}

TEST_CASE("eval: oracle predictions score zero in both depth modes; missing ground truth is named") {
  const auto data = toy_dataset("eval_data", 2, 6);
  const auto root = scratch("eval");
  for (const auto& dir : scene::list_sequences(data)) {
    const auto seq = scene::read_sequence(dir);
    eval::write_predictions(root / "preds" / seq.name, eval::oracle_predictions(seq));
  }
  auto r = run_cli({"eval", "--predictions", (root / "preds").string(), "--gt", data.string(), "--out",
                    (root / "m").string()});
  REQUIRE(r.code == 0);
  const auto report = nlohmann::json::parse(slurp(root / "m" / "metrics.json"));
  REQUIRE(report.at("sequences").size() == 2);
  for (const auto& s : report.at("sequences")) {
    CHECK(s.at("ate").get<double>() < 1e-9);
    CHECK(s.at("depth_per_scene").at("abs_rel").get<double>() < 1e-9);
    CHECK(s.at("depth_per_scene").at("delta_1_25").get<double>() == 1.0);
    CHECK(s.at("depth_metric").at("abs_rel").get<double>() < 1e-9);
    CHECK(s.at("depth_metric").at("delta_1_25").get<double>() == 1.0);
  }

  r = run_cli({"eval", "--predictions", (root / "preds" / "seq_000").string(), "--gt",
               (root / "nowhere").string(), "--out", (root / "n").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find((root / "nowhere").string()) != std::string::npos);
}

TEST_CASE("ablate: default variants, dual emit and rerun determinism") {
  const auto data = toy_dataset("ablate_data", 3, 5);
  const auto root = scratch("ablate");
  auto args = [&](const std::string& out) {
    return with_toy({"ablate", "--data", data.string(), "--out", (root / out).string(), "--steps", "2", "--set",
                     "ablate.stage2_steps=1", "ablate.holdout=1", "train.clip_length=3", "train.stage2_min=3",
                     "train.stage2_max=5"});
  };
  REQUIRE(run_cli(args("a")).code == 0);
  REQUIRE(run_cli(args("b")).code == 0);
  CHECK(slurp(root / "a" / "ablation.json") == slurp(root / "b" / "ablation.json"));
  CHECK(slurp(root / "a" / "ablation.txt") == slurp(root / "b" / "ablation.txt"));

  const auto j = nlohmann::json::parse(slurp(root / "a" / "ablation.json"));
  std::vector<std::string> names;
  for (const auto& row : j.at("rows")) names.push_back(row.at("variant"));
  CHECK(names == pipeline::default_variants());
  std::istringstream text(slurp(root / "a" / "ablation.txt"));
  std::string header;
  std::getline(text, header);
  for (const auto& row : j.at("rows")) {
    std::string name;
    double v[6];
    text >> name;
    for (double& x : v) text >> x;
    CHECK(name == row.at("variant"));
    CHECK(v[0] == row.at("ate").get<double>());
    CHECK(v[3] == row.at("abs_rel").get<double>());
    CHECK(v[4] == row.at("delta").get<double>());
  }
}
