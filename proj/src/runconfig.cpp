#include "mem4d/runconfig.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

extern char** environ;

namespace mem4d::cli {

namespace {

using T = RunConfig::Type;

std::vector<RunConfig::Key> default_schema() {
  return {
      {"seed", T::kUnsigned, "0", "seed for data, initialization and sampling"},
      {"model.image_height", T::kUnsigned, "48", ""},
      {"model.image_width", T::kUnsigned, "64", ""},
      {"model.patch", T::kUnsigned, "8", ""},
      {"model.channels", T::kUnsigned, "48", "token width C (memories use the same)"},
      {"model.head_dim", T::kUnsigned, "24", "must be divisible by 6"},
      {"model.rope_base", T::kReal, "100", ""},
      {"model.mlp_ratio", T::kUnsigned, "4", ""},
      {"model.encoder_layers", T::kUnsigned, "2", ""},
      {"model.tca_window", T::kUnsigned, "5", "k_t"},
      {"model.tca_layers", T::kUnsigned, "4", ""},
      {"model.tdm_memory", T::kUnsigned, "2", "k_d"},
      {"model.pyramid_levels", T::kUnsigned, "3", ""},
      {"model.tdm_layers", T::kUnsigned, "4", ""},
      {"model.psm_capacity", T::kUnsigned, "16", "k_s"},
      {"model.psm_layers", T::kUnsigned, "4", ""},
      {"model.readout_stages", T::kUnsigned, "4", "L_read"},
      {"model.fov_max_degrees", T::kReal, "120", ""},
      {"model.variant", T::kString, "full", "wiring: full, no_tdm, no_psm, no_tca, unified"},
      {"train.stage", T::kUnsigned, "1", "1 or 2"},
      {"train.clip_length", T::kUnsigned, "5", "stage-1 clip length"},
      {"train.stage2_min", T::kUnsigned, "5", ""},
      {"train.stage2_max", T::kUnsigned, "16", ""},
      {"train.batch_size", T::kUnsigned, "1", ""},
      {"train.steps", T::kUnsigned, "2000", ""},
      {"train.learning_rate", T::kReal, "0.001", ""},
      {"train.weight_decay", T::kReal, "0.05", ""},
      {"train.warmup_fraction", T::kReal, "0.05", ""},
      {"train.clip_norm", T::kReal, "1", "global gradient norm clip; 0 disables"},
      {"train.max_consecutive_nan", T::kUnsigned, "3", ""},
      {"loss.alpha", T::kReal, "0.2", ""},
      {"loss.beta", T::kReal, "0.1", ""},
      {"loss.lambda_conf", T::kReal, "1", ""},
      {"loss.lambda_abspose", T::kReal, "0.1", ""},
      {"loss.lambda_relpose", T::kReal, "0.1", ""},
      {"loss.use_relpose", T::kBool, "true", ""},
      {"data.sequences", T::kUnsigned, "8", ""},
      {"data.frames", T::kUnsigned, "8", ""},
      {"data.width", T::kUnsigned, "64", ""},
      {"data.height", T::kUnsigned, "48", ""},
      {"data.fov_degrees", T::kReal, "60", ""},
      {"data.room", T::kBool, "true", ""},
      {"data.static_boxes", T::kUnsigned, "2", ""},
      {"data.dynamic_count", T::kUnsigned, "1", ""},
      {"data.camera_speed", T::kReal, "0.08", ""},
      {"eval.alignment", T::kString, "scale", "per-scene depth alignment: scale or scale_shift"},
      {"eval.rpe_delta", T::kUnsigned, "1", ""},
      {"eval.chamfer_max_points", T::kUnsigned, "4000", ""},
      {"ablate.variants", T::kString, "full,no_stage2,no_relpose,no_tdm,no_psm,no_tca", "comma-separated"},
      {"ablate.stage2_steps", T::kUnsigned, "500", ""},
      {"ablate.holdout", T::kUnsigned, "2", "sequences held out of paths.data when paths.eval_data is empty"},
      {"paths.out", T::kString, "", "output directory"},
      {"paths.data", T::kString, "", "dataset root"},
      {"paths.eval_data", T::kString, "", "evaluation dataset root"},
      {"paths.init_from", T::kString, "", "checkpoint to start training from"},
      {"paths.checkpoint", T::kString, "", "model checkpoint for streaming"},
      {"paths.sequence", T::kString, "", "sequence directory to stream"},
      {"paths.predictions", T::kString, "", "prediction directory to evaluate"},
      {"paths.gt", T::kString, "", "ground-truth sequence or dataset directory"},
  };
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_unsigned(const std::string& v, std::size_t& out) {
  if (v.empty() || v[0] == '-' || v[0] == '+') return false;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  return r.ec == std::errc() && r.ptr == v.data() + v.size();
}

bool parse_real(const std::string& v, double& out) {
  if (v.empty()) return false;
  std::size_t used = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    return false;
  }
  return used == v.size() && std::isfinite(out);
}

bool parse_bool(const std::string& v, bool& out) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return out = true, true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return out = false, true;
  return false;
}

}  // namespace

RunConfig::RunConfig() : schema_(default_schema()) {
  for (const auto& k : schema_) values_[k.name] = k.value;
}

const RunConfig::Key& RunConfig::key(const std::string& name) const {
  for (const auto& k : schema_)
    if (k.name == name) return k;
  throw ConfigError("unknown config key '" + name + "'");
}

void RunConfig::set(const std::string& name, const std::string& raw) {
  const Key& k = key(name);
  const std::string v = trim(raw);
  std::size_t u = 0;
  double d = 0;
  bool b = false;
  switch (k.type) {
    case Type::kUnsigned:
      if (!parse_unsigned(v, u)) throw ConfigError("key '" + name + "' needs a non-negative integer, got '" + v + "'");
      break;
    case Type::kReal:
      if (!parse_real(v, d)) throw ConfigError("key '" + name + "' needs a finite number, got '" + v + "'");
      break;
    case Type::kBool:
      if (!parse_bool(v, b)) throw ConfigError("key '" + name + "' needs true or false, got '" + v + "'");
      break;
    case Type::kString:
      break;
  }
  values_[name] = v;
}

void RunConfig::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    try {
      set_assignment(line);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

std::string RunConfig::env_name(const std::string& key) {
  std::string out = "MEM4D_";
  for (char c : key) out += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

void RunConfig::apply_environment(const std::map<std::string, std::string>& env) {
  std::map<std::string, std::string> by_env;
  for (const auto& k : schema_) by_env[env_name(k.name)] = k.name;
  for (const auto& [var, value] : env) {
    if (var.rfind("MEM4D_", 0) != 0) continue;
    const auto it = by_env.find(var);
    if (it == by_env.end()) throw ConfigError("environment variable " + var + " matches no config key");
    try {
      set(it->second, value);
    } catch (const ConfigError& e) {
      throw ConfigError(var + ": " + e.what());
    }
  }
}

std::map<std::string, std::string> RunConfig::process_environment() {
  std::map<std::string, std::string> env;
  for (char** e = environ; e != nullptr && *e != nullptr; ++e) {
    const std::string kv(*e);
    const auto eq = kv.find('=');
    if (eq != std::string::npos) env[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  return env;
}

const std::string& RunConfig::str(const std::string& name) const {
  key(name);
  return values_.at(name);
}

std::size_t RunConfig::uns(const std::string& name) const {
  if (key(name).type != Type::kUnsigned) throw ConfigError("key '" + name + "' is not an integer");
  std::size_t u = 0;
  parse_unsigned(values_.at(name), u);
  return u;
}

Real RunConfig::real(const std::string& name) const {
  if (key(name).type != Type::kReal) throw ConfigError("key '" + name + "' is not a number");
  double d = 0;
  parse_real(values_.at(name), d);
  return static_cast<Real>(d);
}

bool RunConfig::flag(const std::string& name) const {
  if (key(name).type != Type::kBool) throw ConfigError("key '" + name + "' is not a boolean");
  bool b = false;
  parse_bool(values_.at(name), b);
  return b;
}

std::string RunConfig::dump() const {
  std::ostringstream out;
  for (const auto& [k, v] : values_) out << k << '=' << v << '\n';
  return out.str();
}

void RunConfig::echo_to(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "config.resolved", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "config.resolved").string());
  out << dump();
}

std::vector<std::string> RunConfig::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_) out.push_back(k);
  return out;
}

pipeline::ModelConfig RunConfig::model() const {
  pipeline::ModelConfig m;
  m.image_height = uns("model.image_height");
  m.image_width = uns("model.image_width");
  m.patch = uns("model.patch");
  m.channels = uns("model.channels");
  m.head_dim = uns("model.head_dim");
  m.rope_base = real("model.rope_base");
  m.mlp_ratio = uns("model.mlp_ratio");
  m.encoder_layers = uns("model.encoder_layers");
  m.tca_window = uns("model.tca_window");
  m.tca_layers = uns("model.tca_layers");
  m.tdm_memory = uns("model.tdm_memory");
  m.pyramid_levels = uns("model.pyramid_levels");
  m.tdm_layers = uns("model.tdm_layers");
  m.psm_capacity = uns("model.psm_capacity");
  m.psm_layers = uns("model.psm_layers");
  m.readout_stages = uns("model.readout_stages");
  m.fov_max_degrees = real("model.fov_max_degrees");
  m.seed = uns("seed");
  m.validate();
  return m;
}

pipeline::Wiring RunConfig::wiring() const {
  const std::string& v = str("model.variant");
  if (v == "no_stage2" || v == "no_relpose") throw ConfigError("model.variant '" + v + "' is a training choice, not a wiring");
  return pipeline::wiring_for(v);
}

pipeline::TrainConfig RunConfig::train() const {
  pipeline::TrainConfig t;
  t.stage = static_cast<int>(uns("train.stage"));
  t.clip_length = uns("train.clip_length");
  t.stage2_min = uns("train.stage2_min");
  t.stage2_max = uns("train.stage2_max");
  t.batch_size = uns("train.batch_size");
  t.steps = uns("train.steps");
  t.seed = uns("seed");
  t.learning_rate = real("train.learning_rate");
  t.weight_decay = real("train.weight_decay");
  t.warmup_fraction = real("train.warmup_fraction");
  t.clip_norm = real("train.clip_norm");
  t.max_consecutive_nan = uns("train.max_consecutive_nan");
  t.loss.alpha = real("loss.alpha");
  t.loss.beta = real("loss.beta");
  t.loss.lambda = {real("loss.lambda_conf"), real("loss.lambda_abspose"), real("loss.lambda_relpose")};
  t.use_relpose = flag("loss.use_relpose");
  t.validate();
  return t;
}

scene::SceneConfig RunConfig::scene() const {
  scene::SceneConfig s;
  s.width = uns("data.width");
  s.height = uns("data.height");
  s.frames = uns("data.frames");
  s.fov_degrees = real("data.fov_degrees");
  s.room = flag("data.room");
  s.static_boxes = uns("data.static_boxes");
  s.dynamic_count = uns("data.dynamic_count");
  s.camera_speed = real("data.camera_speed");
  s.validate();
  return s;
}

eval::EvalOptions RunConfig::evaluation() const {
  eval::EvalOptions e;
  const std::string& a = str("eval.alignment");
  if (a == "scale") {
    e.alignment = eval::DepthAlignment::kScale;
  } else if (a == "scale_shift") {
    e.alignment = eval::DepthAlignment::kScaleShift;
  } else {
    throw ConfigError("eval.alignment must be scale or scale_shift, got '" + a + "'");
  }
  e.rpe_delta = uns("eval.rpe_delta");
  if (e.rpe_delta == 0) throw ConfigError("eval.rpe_delta must be positive");
  e.chamfer_max_points = uns("eval.chamfer_max_points");
  return e;
}

std::vector<std::string> RunConfig::variants() const {
  std::vector<std::string> out;
  std::stringstream in(str("ablate.variants"));
  for (std::string v; std::getline(in, v, ',');) {
    v = trim(v);
    if (v.empty()) continue;
    if (!pipeline::is_known_variant(v)) throw ConfigError("unknown ablation variant '" + v + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace mem4d::cli
