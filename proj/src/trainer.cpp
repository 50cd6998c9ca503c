#include "mem4d/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include <Eigen/Geometry>
#include <spdlog/spdlog.h>

namespace mem4d::pipeline {

using nlohmann::json;

void TrainConfig::validate() const {
  if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
  if (clip_length == 0) throw ConfigError("clip_length must be positive");
  if (stage2_min == 0 || stage2_min > stage2_max) throw ConfigError("stage-2 length range must satisfy 0 < min <= max");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (warmup_fraction < 0 || warmup_fraction > 1) throw ConfigError("warmup_fraction must lie in [0, 1]");
  if (max_consecutive_nan == 0) throw ConfigError("max_consecutive_nan must be positive");
  for (Real l : loss.lambda)
    if (l < 0) throw ConfigError("loss weights must be non-negative");
}

json TrainConfig::to_json() const {
  return {{"stage", stage},
          {"clip_length", clip_length},
          {"stage2_min", stage2_min},
          {"stage2_max", stage2_max},
          {"batch_size", batch_size},
          {"steps", steps},
          {"seed", seed},
          {"learning_rate", learning_rate},
          {"weight_decay", weight_decay},
          {"warmup_fraction", warmup_fraction},
          {"clip_norm", clip_norm},
          {"alpha", loss.alpha},
          {"beta", loss.beta},
          {"lambda", loss.lambda},
          {"use_relpose", use_relpose}};
}

ClipSampler::ClipSampler(const TrainConfig& config, std::vector<std::size_t> sequence_lengths)
    : min_length_(config.stage == 1 ? config.clip_length : config.stage2_min),
      max_length_(config.stage == 1 ? config.clip_length : config.stage2_max),
      lengths_(std::move(sequence_lengths)),
      rng_(config.seed) {
  if (lengths_.empty()) throw ConfigError("training needs at least one sequence");
  for (std::size_t n : lengths_) {
    if (n < min_length_) {
      throw ConfigError("sequence of " + std::to_string(n) + " frames is shorter than the sampled length " +
                        std::to_string(min_length_));
    }
  }
}

Clip ClipSampler::next() {
  Clip c;
  c.sequence = std::uniform_int_distribution<std::size_t>(0, lengths_.size() - 1)(rng_);
  const std::size_t n = lengths_[c.sequence];
  c.length = std::uniform_int_distribution<std::size_t>(min_length_, std::min(max_length_, n))(rng_);
  c.start = std::uniform_int_distribution<std::size_t>(0, n - c.length)(rng_);
  return c;
}

json to_json(const StepRecord& r) {
  json j = {{"step", r.step},   {"L_conf", r.conf}, {"L_abspose", r.abspose}, {"L_relpose", r.relpose},
            {"total", r.total}, {"lr", r.lr}};
  if (r.skipped) j["skipped"] = true;
  return j;
}

std::vector<loss::GroundTruthFrame> reanchor(const std::vector<loss::GroundTruthFrame>& truth) {
  if (truth.empty()) return truth;
  const auto& anchor = truth.front();
  const Eigen::Quaterniond qa(anchor.quaternion[0], anchor.quaternion[1], anchor.quaternion[2], anchor.quaternion[3]);
  const Eigen::Vector3d ta(anchor.translation[0], anchor.translation[1], anchor.translation[2]);
  const Eigen::Matrix3d ra = qa.toRotationMatrix();
  std::vector<loss::GroundTruthFrame> moved = truth;
  for (auto& g : moved) {
    std::vector<Real> pts = g.x_global.to_vector();
    for (std::size_t k = 0; k < pts.size(); k += 3) {
      const Eigen::Vector3d p = ra * Eigen::Vector3d(pts[k], pts[k + 1], pts[k + 2]) + ta;
      for (int c = 0; c < 3; ++c) pts[k + c] = static_cast<Real>(p[c]);
    }
    g.x_global = Tensor::from(g.x_global.shape(), std::move(pts));
    // T_t T_a^{-1}
    const Eigen::Quaterniond qt(g.quaternion[0], g.quaternion[1], g.quaternion[2], g.quaternion[3]);
    const Eigen::Vector3d tt(g.translation[0], g.translation[1], g.translation[2]);
    Eigen::Quaterniond dq = (qt * qa.conjugate()).normalized();
    if (dq.w() < 0) dq.coeffs() = -dq.coeffs();
    const Eigen::Vector3d dt = tt - dq * ta;
    g.quaternion = Tensor::from({4}, {Real(dq.w()), Real(dq.x()), Real(dq.y()), Real(dq.z())});
    g.translation = Tensor::from({3}, {Real(dt.x()), Real(dt.y()), Real(dt.z())});
  }
  return moved;
}

loss::LossParts clip_loss(const Model& model, const SequenceTensors& sequence, std::size_t start, std::size_t length,
                          const loss::LossConfig& config, bool use_relpose) {
  if (start + length > sequence.images.size()) throw ArgumentError("clip runs past the end of " + sequence.name);
  StreamState state(model.config());
  std::vector<decoder::FramePrediction> preds;
  for (std::size_t i = start; i < start + length; ++i) preds.push_back(process_frame(model, state, sequence.images[i]));
  std::vector<loss::GroundTruthFrame> truth(sequence.truth.begin() + static_cast<long>(start),
                                            sequence.truth.begin() + static_cast<long>(start + length));
  // A clip is its own stream, so its first frame becomes the world frame.
  if (start > 0) truth = reanchor(truth);
  return loss::sequence_loss(preds, truth, config, use_relpose);
}

loss::LossParts probe_loss(const Model& model, const std::vector<SequenceTensors>& data, std::size_t length,
                           const loss::LossConfig& config, bool use_relpose) {
  NoGradScope no_grad;
  Real conf = 0, abspose = 0, relpose = 0, total = 0;
  for (const auto& s : data) {
    const auto parts = clip_loss(model, s, 0, std::min(length, s.images.size()), config, use_relpose);
    conf += parts.conf.item();
    abspose += parts.abspose.item();
    relpose += parts.relpose.item();
    total += parts.total.item();
  }
  const Real n = static_cast<Real>(std::max<std::size_t>(data.size(), 1));
  return {Tensor::scalar(conf / n), Tensor::scalar(abspose / n), Tensor::scalar(relpose / n), Tensor::scalar(total / n)};
}

namespace {

void clip_gradients(nn::ParamStore& store, Real max_norm) {
  if (!(max_norm > 0)) return;
  double sq = 0;
  for (const auto& [name, t] : store.entries()) {
    if (!t.has_grad()) continue;
    for (Real g : t.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (!(norm > max_norm)) return;  // also leaves non-finite norms for the optimizer to reject
  const Real factor = static_cast<Real>(max_norm / norm);
  for (const auto& [name, t] : store.entries()) {
    if (!t.has_grad()) continue;
    Tensor p = t;
    for (Real& g : p.mutable_grad()) g *= factor;
  }
}

void write_optimizer(Checkpoint& ckpt, const nn::ParamStore& store, const nn::AdamW& opt) {
  const auto& entries = store.entries();
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const Shape shape = entries[k].second.shape();
    ckpt.add("adam/m/" + entries[k].first, shape, opt.first_moments()[k]);
    ckpt.add("adam/v/" + entries[k].first, shape, opt.second_moments()[k]);
  }
  ckpt.meta["optimizer"] = {{"step", opt.step_count()}};
}

void restore_optimizer(nn::AdamW& opt, const nn::ParamStore& store, const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("optimizer")) throw IoError("checkpoint holds no optimizer state");
  std::vector<std::vector<Real>> m, v;
  for (const auto& [name, t] : store.entries()) {
    const auto& em = ckpt.at("adam/m/" + name);
    const auto& ev = ckpt.at("adam/v/" + name);
    if (em.values.size() != t.numel() || ev.values.size() != t.numel()) {
      throw IoError("optimizer state for " + name + " does not match the parameter");
    }
    m.push_back(em.values);
    v.push_back(ev.values);
  }
  opt.restore(ckpt.meta.at("optimizer").at("step").get<std::size_t>(), std::move(m), std::move(v));
}

}  // namespace

TrainResult train_stage(Model& model, const TrainConfig& config, const std::vector<SequenceTensors>& data,
                        std::ostream* jsonl, const Checkpoint* optimizer_state) {
  config.validate();
  std::vector<std::size_t> lengths;
  for (const auto& s : data) lengths.push_back(s.images.size());
  ClipSampler sampler(config, lengths);

  nn::AdamWConfig oc;
  oc.learning_rate = config.learning_rate;
  oc.weight_decay = config.weight_decay;
  oc.total_steps = std::max<std::size_t>(config.steps, 1);
  oc.warmup_steps = static_cast<std::size_t>(std::llround(config.warmup_fraction * static_cast<Real>(config.steps)));
  nn::ParamStore& store = model.params();
  nn::AdamW opt(store, oc);
  if (optimizer_state != nullptr) restore_optimizer(opt, store, *optimizer_state);

  TrainResult result;
  std::size_t consecutive_nan = 0;
  const Real inv_batch = Real(1) / static_cast<Real>(config.batch_size);
  while (opt.step_count() < config.steps) {
    StepRecord rec;
    rec.step = opt.step_count();
    rec.lr = opt.current_learning_rate();
    store.zero_grad();
    bool finite = true;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const Clip clip = sampler.next();
      GradientTape tape;
      TapeScope scope(tape);
      loss::LossParts parts;
      try {
        parts = clip_loss(model, data[clip.sequence], clip.start, clip.length, config.loss, config.use_relpose);
      } catch (const StreamError& e) {
        spdlog::warn("step {}: {}", rec.step, e.what());
        finite = false;
        break;
      }
      rec.conf += parts.conf.item() * inv_batch;
      rec.abspose += parts.abspose.item() * inv_batch;
      rec.relpose += parts.relpose.item() * inv_batch;
      rec.total += parts.total.item() * inv_batch;
      if (!std::isfinite(parts.total.item())) {
        finite = false;
        break;
      }
      tape.backward(scale(parts.total, inv_batch));
    }
    if (finite) {
      clip_gradients(store, config.clip_norm);
      finite = opt.step(store);
    }
    if (!finite) {
      // The optimizer never advanced: the same step index is retried with the next clips.
      rec.skipped = true;
      ++result.skipped;
      spdlog::warn("step {}: non-finite loss or gradient, update skipped", rec.step);
      if (++consecutive_nan >= config.max_consecutive_nan) {
        result.log.push_back(rec);
        if (jsonl != nullptr) *jsonl << to_json(rec).dump() << '\n' << std::flush;
        store.zero_grad();
        throw TrainingError("aborting after " + std::to_string(consecutive_nan) + " consecutive non-finite steps at step " +
                            std::to_string(rec.step));
      }
    } else {
      consecutive_nan = 0;
    }
    result.log.push_back(rec);
    if (jsonl != nullptr) *jsonl << to_json(rec).dump() << '\n' << std::flush;
  }
  store.zero_grad();

  result.checkpoint = model_checkpoint(model);
  write_optimizer(result.checkpoint, store, opt);
  result.checkpoint.meta["train"] = config.to_json();
  return result;
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

const std::vector<std::string>& default_variants() {
  static const std::vector<std::string> v{"full", "no_stage2", "no_relpose", "no_tdm", "no_psm", "no_tca"};
  return v;
}

bool is_known_variant(const std::string& name) {
  return name == "unified" ||
         std::find(default_variants().begin(), default_variants().end(), name) != default_variants().end();
}

Wiring wiring_for(const std::string& variant) {
  if (!is_known_variant(variant)) throw ConfigError("unknown ablation variant '" + variant + "'");
  Wiring w;
  if (variant == "no_tdm") w.tdm = false;
  if (variant == "no_psm") w.psm = false;
  if (variant == "no_tca") w.tca = false;
  if (variant == "unified") w.unified = true;
  return w;
}

namespace {

double mean_of(const std::vector<eval::SequenceMetrics>& seqs, double (*get)(const eval::SequenceMetrics&)) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& m : seqs) {
    s += get(m);
    ++n;
  }
  return n == 0 ? 0 : s / static_cast<double>(n);
}

}  // namespace

AblationReport run_ablation(const AblationConfig& config, const std::vector<SequenceTensors>& train,
                            const std::vector<scene::Sequence>& evaluation, std::ostream* progress) {
  std::vector<std::string> variants = config.variants.empty() ? std::vector<std::string>{"full"} : config.variants;
  for (const auto& v : variants) wiring_for(v);
  AblationReport report;
  for (const auto& v : variants) {
    Model model(config.model, wiring_for(v));
    TrainConfig s1 = config.stage1, s2 = config.stage2;
    s1.stage = 1;
    s2.stage = 2;
    if (v == "no_relpose") s1.use_relpose = s2.use_relpose = false;
    auto trained = train_stage(model, s1, train);
    VariantResult row;
    row.name = v;
    if (!trained.log.empty()) row.final_loss = trained.log.back().total;
    if (v != "no_stage2" && s2.steps > 0) {
      trained = train_stage(model, s2, train);
      if (!trained.log.empty()) row.final_loss = trained.log.back().total;
    }
    row.sequences = evaluate_model(model, evaluation, config.eval);
    row.ate = mean_of(row.sequences, [](const eval::SequenceMetrics& m) { return m.ate; });
    row.rpe_trans = mean_of(row.sequences, [](const eval::SequenceMetrics& m) { return m.rpe_trans; });
    row.rpe_rot = mean_of(row.sequences, [](const eval::SequenceMetrics& m) { return m.rpe_rot; });
    row.abs_rel = mean_of(row.sequences, [](const eval::SequenceMetrics& m) { return m.per_scene.abs_rel; });
    row.delta = mean_of(row.sequences, [](const eval::SequenceMetrics& m) { return m.per_scene.delta; });
    double dyn = 0;
    std::size_t nd = 0;
    for (const auto& m : row.sequences) {
      if (!m.has_dynamic) continue;
      dyn += m.dynamic_per_scene.abs_rel;
      ++nd;
    }
    row.dynamic_abs_rel = nd == 0 ? 0 : dyn / static_cast<double>(nd);
    if (progress != nullptr) {
      *progress << v << ": ATE " << row.ate << " AbsRel " << row.abs_rel << " dynamic AbsRel " << row.dynamic_abs_rel
                << std::endl;
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

json AblationReport::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) {
    json seqs = json::array();
    for (const auto& m : r.sequences) seqs.push_back(eval::to_json(m));
    rows_json.push_back({{"variant", r.name},
                         {"ate", r.ate},
                         {"rpe_trans", r.rpe_trans},
                         {"rpe_rot", r.rpe_rot},
                         {"abs_rel", r.abs_rel},
                         {"delta", r.delta},
                         {"dynamic_abs_rel", r.dynamic_abs_rel},
                         {"final_loss", r.final_loss},
                         {"sequences", seqs}});
  }
  return {{"schema_version", eval::kReportSchema}, {"rows", rows_json}};
}

std::string AblationReport::to_text() const {
  std::ostringstream out;
  out << std::left << std::setw(12) << "variant" << std::right;
  for (const char* h : {"ATE", "RPE_trans", "RPE_rot", "AbsRel", "delta", "dyn_AbsRel"}) out << std::setw(14) << h;
  out << '\n';
  // Values print with max_digits10 so the text table parses back to the JSON doubles.
  out << std::setprecision(17);
  for (const auto& r : rows) {
    out << std::left << std::setw(12) << r.name << std::right;
    for (double v : {r.ate, r.rpe_trans, r.rpe_rot, r.abs_rel, r.delta, r.dynamic_abs_rel}) out << ' ' << std::setw(13) << v;
    out << '\n';
  }
  return out.str();
}

const VariantResult& AblationReport::row(const std::string& name) const {
  for (const auto& r : rows)
    if (r.name == name) return r;
  throw ArgumentError("no ablation row named '" + name + "'");
}

}  // namespace mem4d::pipeline
