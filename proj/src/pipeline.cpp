#include "mem4d/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace mem4d::pipeline {

using nlohmann::json;
using nn::TokenGrid;

void ModelConfig::validate() const {
  if (patch == 0 || image_height % patch != 0 || image_width % patch != 0) {
    throw ConfigError("image extents must be divisible by the patch size");
  }
  if (channels == 0 || head_dim == 0 || channels % head_dim != 0) {
    throw ConfigError("channels must be a positive multiple of head_dim");
  }
  nn::validate_rope(head_dim, rope_base);
  if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
  if (tca_window == 0 || tdm_memory == 0 || psm_capacity == 0) throw ConfigError("memory sizes must be positive");
  if (tca_layers == 0 || tdm_layers == 0 || psm_layers == 0 || readout_stages == 0) {
    throw ConfigError("layer counts must be positive");
  }
  if (pyramid_levels == 0) throw ConfigError("pyramid_levels must be positive");
  if (!(fov_max_degrees > 0 && fov_max_degrees < 180)) throw ConfigError("fov_max must lie in (0, 180) degrees");
}

json ModelConfig::to_json() const {
  return {{"image_height", image_height},     {"image_width", image_width},
          {"patch", patch},                   {"channels", channels},
          {"head_dim", head_dim},             {"rope_base", rope_base},
          {"mlp_ratio", mlp_ratio},           {"encoder_layers", encoder_layers},
          {"tca_window", tca_window},         {"tca_layers", tca_layers},
          {"tdm_memory", tdm_memory},         {"pyramid_levels", pyramid_levels},
          {"tdm_layers", tdm_layers},         {"psm_capacity", psm_capacity},
          {"psm_layers", psm_layers},         {"readout_stages", readout_stages},
          {"fov_max_degrees", fov_max_degrees}, {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  try {
    c.image_height = j.at("image_height");
    c.image_width = j.at("image_width");
    c.patch = j.at("patch");
    c.channels = j.at("channels");
    c.head_dim = j.at("head_dim");
    c.rope_base = j.at("rope_base");
    c.mlp_ratio = j.at("mlp_ratio");
    c.encoder_layers = j.at("encoder_layers");
    c.tca_window = j.at("tca_window");
    c.tca_layers = j.at("tca_layers");
    c.tdm_memory = j.at("tdm_memory");
    c.pyramid_levels = j.at("pyramid_levels");
    c.tdm_layers = j.at("tdm_layers");
    c.psm_capacity = j.at("psm_capacity");
    c.psm_layers = j.at("psm_layers");
    c.readout_stages = j.at("readout_stages");
    c.fov_max_degrees = j.at("fov_max_degrees");
    c.seed = j.at("seed");
  } catch (const json::exception& e) {
    throw IoError(std::string("model config in checkpoint is incomplete: ") + e.what());
  }
  c.validate();
  return c;
}

json Wiring::to_json() const { return {{"tca", tca}, {"tdm", tdm}, {"psm", psm}, {"unified", unified}}; }

Wiring Wiring::from_json(const json& j) {
  try {
    return Wiring{j.at("tca"), j.at("tdm"), j.at("psm"), j.at("unified")};
  } catch (const json::exception& e) {
    throw IoError(std::string("wiring in checkpoint is incomplete: ") + e.what());
  }
}

Model::Model(const ModelConfig& config, Wiring wiring) : config_(config), wiring_(wiring), store_(config.seed) {
  config.validate();
  if (wiring.unified && !(wiring.tdm && wiring.psm)) throw ConfigError("the unified variant needs both TDM and PSM");
  const nn::AttentionConfig attn = config.attention();
  const std::size_t c = config.channels;
  embed_ = nn::PatchEmbed(store_, "encoder.embed", 3, config.patch, c);
  if (config.encoder_layers > 0) encoder_ = nn::AttentionStack(store_, "encoder.blocks", attn, config.encoder_layers);
  if (wiring.tca) tca_ = tca::TemporalContextAggregator(store_, "tca", {config.tca_window, config.tca_layers, attn});
  if (wiring.tdm) {
    tdm_ = tdm::DynamicsMemoryBuilder(store_, "tdm", {config.tdm_memory, config.pyramid_levels, config.tdm_layers, true, attn},
                                      config.grid_height(), config.grid_width());
  }
  if (wiring.psm) {
    structure_encoder_ = psm::StructureEncoder(store_, "psm.encoder", {config.psm_capacity, config.psm_layers, config.patch, attn});
    compressor_ = psm::StructureCompressor(store_, "psm.compressor", c);
  }
  decoder::DecoderConfig dc;
  dc.stages = config.readout_stages;
  dc.memory_channels = c;
  dc.structure_channels = c;
  dc.patch = config.patch;
  dc.image_height = config.image_height;
  dc.image_width = config.image_width;
  dc.fov_max_degrees = config.fov_max_degrees;
  dc.attention = attn;
  decoder_ = decoder::Decoder(store_, "decoder", dc);
}

TokenGrid Model::encode(const Tensor& image) const {
  TokenGrid g = embed_.forward(image, 0);
  if (encoder_.depth() > 0) g.tokens = encoder_.forward(g.tokens, g.positions);
  return g;
}

namespace {

bool all_finite(const Tensor& t) {
  for (Real v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

json positions_json(const std::vector<nn::Pos3>& positions) {
  json flat = json::array();
  for (const auto& p : positions) flat.insert(flat.end(), {p.t, p.y, p.x});
  return flat;
}

std::vector<nn::Pos3> positions_from(const json& flat) {
  if (!flat.is_array() || flat.size() % 3 != 0) throw IoError("stream state: malformed position list");
  std::vector<nn::Pos3> out;
  for (std::size_t i = 0; i < flat.size(); i += 3) out.push_back({flat[i].get<int>(), flat[i + 1].get<int>(), flat[i + 2].get<int>()});
  return out;
}

json grid_meta(const TokenGrid& g) {
  return {{"height", g.height}, {"width", g.width}, {"positions", positions_json(g.positions)}};
}

TokenGrid grid_from(const Checkpoint& ckpt, const std::string& name, const json& meta) {
  const auto& e = ckpt.at(name);
  TokenGrid g{Tensor::from(e.shape, e.values), positions_from(meta.at("positions")), meta.at("height"), meta.at("width")};
  if (g.tokens.rank() != 2 || g.tokens.dim(0) != g.positions.size()) throw IoError("stream state: grid " + name + " is inconsistent");
  return g;
}

}  // namespace

decoder::FramePrediction process_frame(const Model& model, StreamState& state, const Tensor& image, FrameTrace* trace,
                                       const Tensor* structure_input) {
  const ModelConfig& cfg = model.config();
  const Wiring& wiring = model.wiring();
  if (image.rank() != 3 || image.dim(0) != cfg.image_height || image.dim(1) != cfg.image_width || image.dim(2) != 3) {
    throw InputError("expected a " + std::to_string(cfg.image_height) + "x" + std::to_string(cfg.image_width) +
                     "x3 image, got " + shape_str(image.shape()));
  }
  const long t = state.t;
  const TokenGrid features = model.encode(image);
  const TokenGrid enriched =
      wiring.tca ? model.tca().aggregate(features, state.history, t, trace ? &trace->tca : nullptr) : features;

  tdm::TransientDynamicsMemory dynamics;
  if (wiring.tdm) dynamics = model.tdm().build(enriched, state.recent, t);

  psm::CompressedBank bank;
  const psm::CompressedBank* bank_ptr = nullptr;
  if (wiring.psm && !state.psm.empty()) {
    bank = model.structure_compressor().compress(state.psm, t);
    bank_ptr = &bank;
  }
  decoder::ReadoutOptions options{wiring.tdm, wiring.psm};
  if (wiring.unified) {
    // One memory: motion tokens join the structure bank with absolute frame positions.
    std::vector<Tensor> parts;
    if (bank.grid.size() > 0) parts.push_back(bank.grid.tokens);
    for (const auto& e : dynamics.entries) {
      parts.push_back(e.grid.tokens);
      for (const auto& p : e.grid.positions) bank.grid.positions.push_back({p.t + static_cast<int>(t), p.y, p.x});
    }
    if (!parts.empty()) bank.grid.tokens = parts.size() == 1 ? parts.front() : concat(parts, 0);
    bank_ptr = &bank;
    dynamics.entries.clear();
    options.motion = false;
  }
  if (trace != nullptr) {
    trace->dynamics_entries = dynamics.size();
    trace->bank_tokens = bank.grid.size();
  }

  const auto refined = model.decoder().readout(enriched, dynamics, bank_ptr, t, options, trace ? &trace->readout : nullptr);
  decoder::FramePrediction pred = model.decoder().predict(refined);
  for (const Tensor* out : {&pred.x_global, &pred.x_self, &pred.c_global, &pred.c_self, &pred.quaternion,
                            &pred.translation, &pred.intrinsics}) {
    if (!all_finite(*out)) throw StreamError("non-finite model output", t);
  }

  if (structure_input != nullptr && structure_input->shape() != pred.x_global.shape()) {
    throw ShapeError("structure input must match the global pointmap");
  }
  if (wiring.psm) state.psm.push(model.structure_encoder().encode(structure_input ? *structure_input : pred.x_global), t);
  if (wiring.tca) state.history.push(features, t);
  if (wiring.tdm) state.recent.push(enriched, t);
  ++state.t;
  return pred;
}

Checkpoint state_to_checkpoint(const StreamState& state) {
  Checkpoint ckpt;
  json meta;
  meta["kind"] = "stream-state";
  meta["t"] = state.t;
  auto window = [&](const tca::HistoryWindow& w, const std::string& key) {
    json list = json::array();
    for (std::size_t i = 0; i < w.size(); ++i) {
      ckpt.add(key + "/" + std::to_string(i), w[i].grid.tokens.detach());
      json m = grid_meta(w[i].grid);
      m["frame"] = w[i].frame;
      list.push_back(m);
    }
    meta[key] = {{"capacity", w.capacity()}, {"entries", list}};
  };
  window(state.history, "history");
  window(state.recent, "recent");
  json entries = json::array();
  for (std::size_t i = 0; i < state.psm.size(); ++i) {
    const auto& e = state.psm.entries()[i];
    ckpt.add("psm/" + std::to_string(i), e.features.tokens.detach());
    json m = grid_meta(e.features);
    m["frame"] = e.frame;
    m["anchor"] = e.anchor;
    entries.push_back(m);
  }
  meta["psm"] = {{"capacity", state.psm.capacity()}, {"entries", entries}};
  ckpt.meta = meta;
  return ckpt;
}

StreamState state_from_checkpoint(const Checkpoint& ckpt, const ModelConfig& config) {
  StreamState state(config);
  try {
    const json& meta = ckpt.meta;
    if (meta.value("kind", "") != "stream-state") throw IoError("checkpoint does not hold a stream state");
    state.t = meta.at("t");
    auto window = [&](tca::HistoryWindow& w, const std::string& key) {
      const json& m = meta.at(key);
      if (m.at("capacity").get<std::size_t>() != w.capacity()) {
        throw IoError("stream state " + key + " capacity does not match the model config");
      }
      const json& list = m.at("entries");
      // Stored newest first; replay oldest first.
      for (std::size_t k = list.size(); k-- > 0;) {
        TokenGrid g = grid_from(ckpt, key + "/" + std::to_string(k), list[k]);
        const long frame = list[k].at("frame");
        if (frame >= state.t) throw IoError("stream state " + key + " holds a future frame");
        w.push(std::move(g), frame);
      }
    };
    window(state.history, "history");
    window(state.recent, "recent");
    const json& pm = meta.at("psm");
    if (pm.at("capacity").get<std::size_t>() != config.psm_capacity) {
      throw IoError("stream state PSM capacity does not match the model config");
    }
    std::vector<psm::PsmEntry> entries;
    const json& list = pm.at("entries");
    for (std::size_t i = 0; i < list.size(); ++i) {
      entries.push_back({grid_from(ckpt, "psm/" + std::to_string(i), list[i]), list[i].at("frame"), list[i].at("anchor")});
    }
    state.psm = psm::PersistentStructureMemory::restore(config.psm_capacity, std::move(entries));
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed stream state: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw IoError(std::string("inconsistent stream state: ") + e.what());
  }
  return state;
}

SequenceTensors to_tensors(const scene::Sequence& sequence) {
  SequenceTensors out;
  out.name = sequence.name;
  const std::size_t h = sequence.height, w = sequence.width;
  for (const auto& f : sequence.frames) {
    std::vector<Real> img(f.rgb.size());
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<Real>(2 * f.rgb[i] - 1);
    out.images.push_back(Tensor::from({h, w, 3}, std::move(img)));
    loss::GroundTruthFrame g;
    g.x_global = Tensor::from({h, w, 3}, std::vector<Real>(f.x_global.begin(), f.x_global.end()));
    g.x_self = Tensor::from({h, w, 3}, std::vector<Real>(f.x_self.begin(), f.x_self.end()));
    g.mask = Tensor::from({h, w}, std::vector<Real>(f.mask.begin(), f.mask.end()));
    g.intrinsics = Tensor::from({3, 3}, {static_cast<Real>(f.intrinsics(0, 0)), static_cast<Real>(f.intrinsics(0, 1)),
                                         static_cast<Real>(f.intrinsics(0, 2)), static_cast<Real>(f.intrinsics(1, 0)),
                                         static_cast<Real>(f.intrinsics(1, 1)), static_cast<Real>(f.intrinsics(1, 2)),
                                         static_cast<Real>(f.intrinsics(2, 0)), static_cast<Real>(f.intrinsics(2, 1)),
                                         static_cast<Real>(f.intrinsics(2, 2))});
    g.quaternion = Tensor::from({4}, {static_cast<Real>(f.rotation.w()), static_cast<Real>(f.rotation.x()),
                                      static_cast<Real>(f.rotation.y()), static_cast<Real>(f.rotation.z())});
    g.translation = Tensor::from({3}, {static_cast<Real>(f.translation.x()), static_cast<Real>(f.translation.y()),
                                       static_cast<Real>(f.translation.z())});
    out.truth.push_back(std::move(g));
  }
  return out;
}

eval::PredictedSequence stream_sequence(const Model& model, const SequenceTensors& sequence,
                                        std::vector<decoder::FramePrediction>* raw) {
  NoGradScope no_grad;
  StreamState state(model.config());
  eval::PredictedSequence out;
  out.name = sequence.name;
  out.height = model.config().image_height;
  out.width = model.config().image_width;
  for (const auto& image : sequence.images) {
    auto p = process_frame(model, state, image);
    eval::Pose pose;
    pose.rotation = Eigen::Quaterniond(p.quaternion[0], p.quaternion[1], p.quaternion[2], p.quaternion[3]);
    pose.translation = Eigen::Vector3d(p.translation[0], p.translation[1], p.translation[2]);
    out.poses.push_back(pose);
    out.x_global.emplace_back(p.x_global.data().begin(), p.x_global.data().end());
    out.x_self.emplace_back(p.x_self.data().begin(), p.x_self.data().end());
    out.confidence.emplace_back(p.c_global.data().begin(), p.c_global.data().end());
    if (raw != nullptr) raw->push_back(std::move(p));
  }
  return out;
}

std::vector<eval::SequenceMetrics> evaluate_model(const Model& model, const std::vector<scene::Sequence>& sequences,
                                                  const eval::EvalOptions& options) {
  std::vector<eval::SequenceMetrics> out;
  for (const auto& s : sequences) out.push_back(eval::evaluate_sequence(stream_sequence(model, to_tensors(s)), s, options));
  return out;
}

void write_ply(const std::filesystem::path& path, const std::vector<double>& points, const std::vector<double>& confidence,
               const std::vector<float>& rgb) {
  const std::size_t n = points.size() / 3;
  if (points.size() != 3 * n || confidence.size() != n || (!rgb.empty() && rgb.size() != 3 * n)) {
    throw ShapeError("PLY export: points, confidence and colours disagree");
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "ply\nformat ascii 1.0\nelement vertex " << n
      << "\nproperty float x\nproperty float y\nproperty float z\nproperty float confidence\n"
         "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  out.precision(7);
  for (std::size_t i = 0; i < n; ++i) {
    auto channel = [&](int c) {
      const float v = rgb.empty() ? 0.5f : rgb[3 * i + c];
      return static_cast<int>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
    };
    out << points[3 * i] << ' ' << points[3 * i + 1] << ' ' << points[3 * i + 2] << ' ' << confidence[i] << ' '
        << channel(0) << ' ' << channel(1) << ' ' << channel(2) << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

Checkpoint model_checkpoint(const Model& model) {
  Checkpoint ckpt;
  for (const auto& [name, t] : model.params().entries()) ckpt.add("param/" + name, t);
  ckpt.meta["kind"] = "model";
  ckpt.meta["model"] = model.config().to_json();
  ckpt.meta["wiring"] = model.wiring().to_json();
  return ckpt;
}

void load_parameters(Model& model, const Checkpoint& ckpt) {
  std::size_t params = 0;
  for (const auto& e : ckpt.entries) params += e.name.rfind("param/", 0) == 0;
  if (params != model.params().entries().size()) {
    throw IoError("checkpoint holds " + std::to_string(params) + " parameters, model expects " +
                  std::to_string(model.params().entries().size()));
  }
  for (const auto& [name, t] : model.params().entries()) {
    const auto& e = ckpt.at("param/" + name);
    if (e.shape != t.shape()) throw IoError("parameter " + name + " has shape " + shape_str(e.shape) + " in checkpoint");
    Tensor dst = t;
    std::copy(e.values.begin(), e.values.end(), dst.mutable_data().begin());
  }
}

std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("model") || !ckpt.meta.contains("wiring")) throw IoError("checkpoint lacks a model description");
  auto model = std::make_unique<Model>(ModelConfig::from_json(ckpt.meta.at("model")), Wiring::from_json(ckpt.meta.at("wiring")));
  load_parameters(*model, ckpt);
  return model;
}

}  // namespace mem4d::pipeline
