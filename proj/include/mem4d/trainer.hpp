#pragma once

#include <cstdint>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mem4d/optim.hpp"
#include "mem4d/pipeline.hpp"

namespace mem4d::pipeline {

/// Raised when training cannot continue (repeated non-finite losses).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int stage = 1;
  std::size_t clip_length = 5;   // stage 1
  std::size_t stage2_min = 5;    // stage 2, inclusive range
  std::size_t stage2_max = 16;
  std::size_t batch_size = 1;
  std::size_t steps = 100;
  std::uint64_t seed = 0;
  Real learning_rate = Real(1e-3);
  Real weight_decay = Real(0.05);
  Real warmup_fraction = Real(0.05);
  Real clip_norm = Real(1);  // global gradient norm; <= 0 disables
  loss::LossConfig loss;
  bool use_relpose = true;
  std::size_t max_consecutive_nan = 3;

  void validate() const;
  nlohmann::json to_json() const;
};

/// Clip drawn by the sampler: sequence index, first frame and length.
struct Clip {
  std::size_t sequence = 0;
  std::size_t start = 0;
  std::size_t length = 0;
};

/// Seeded clip sampler. Stage 1 draws fixed-length clips, stage 2 draws
/// lengths uniformly from [stage2_min, stage2_max] capped at the sequence length.
class ClipSampler {
 public:
  ClipSampler(const TrainConfig& config, std::vector<std::size_t> sequence_lengths);
  Clip next();

 private:
  std::size_t min_length_, max_length_;
  std::vector<std::size_t> lengths_;
  std::mt19937_64 rng_;
};

struct StepRecord {
  std::size_t step = 0;
  Real conf = 0, abspose = 0, relpose = 0, total = 0;
  Real lr = 0;
  bool skipped = false;
};
nlohmann::json to_json(const StepRecord& r);

struct TrainResult {
  std::vector<StepRecord> log;
  std::size_t skipped = 0;
  Checkpoint checkpoint;  // parameters + optimizer moments + meta
};

/// Unrolls process_frame with gradients over every sampled clip, averages the
/// objective over the batch, clips and applies one AdamW update per step.
/// `optimizer_state`, when given, must come from a checkpoint of the same
/// stage and restores the moments. Each step is appended to `jsonl` as it
/// completes.
TrainResult train_stage(Model& model, const TrainConfig& config, const std::vector<SequenceTensors>& data,
                        std::ostream* jsonl = nullptr, const Checkpoint* optimizer_state = nullptr);

/// Mean objective over a deterministic probe set: the first `length` frames
/// of every sequence, no gradients.
loss::LossParts probe_loss(const Model& model, const std::vector<SequenceTensors>& data, std::size_t length,
                           const loss::LossConfig& config, bool use_relpose = true);

/// Re-expresses ground truth in the camera frame of its first entry.
std::vector<loss::GroundTruthFrame> reanchor(const std::vector<loss::GroundTruthFrame>& truth);

/// One training objective on a clip, recorded on the active tape.
loss::LossParts clip_loss(const Model& model, const SequenceTensors& sequence, std::size_t start, std::size_t length,
                          const loss::LossConfig& config, bool use_relpose = true);

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

/// Supported variant names: full, no_stage2, no_relpose, no_tdm, no_psm,
/// no_tca, unified.
const std::vector<std::string>& default_variants();
bool is_known_variant(const std::string& name);
Wiring wiring_for(const std::string& variant);

struct AblationConfig {
  ModelConfig model;
  TrainConfig stage1;
  TrainConfig stage2;  // steps = 0 skips stage 2 for every variant
  eval::EvalOptions eval;
  std::vector<std::string> variants;  // empty -> {"full"}
};

struct VariantResult {
  std::string name;
  double ate = 0, rpe_trans = 0, rpe_rot = 0;
  double abs_rel = 0, delta = 0;  // per-scene depth
  double dynamic_abs_rel = 0;
  double final_loss = 0;  // last logged training objective
  std::vector<eval::SequenceMetrics> sequences;
};

struct AblationReport {
  std::vector<VariantResult> rows;
  nlohmann::json to_json() const;
  std::string to_text() const;
  const VariantResult& row(const std::string& name) const;
};

/// Trains and evaluates each variant from the same seed, schedule and data.
/// `progress`, when set, receives one line per finished variant.
AblationReport run_ablation(const AblationConfig& config, const std::vector<SequenceTensors>& train,
                            const std::vector<scene::Sequence>& evaluation, std::ostream* progress = nullptr);

}  // namespace mem4d::pipeline
