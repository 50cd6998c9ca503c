#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "mem4d/checkpoint.hpp"
#include "mem4d/dataset.hpp"
#include "mem4d/decoder.hpp"
#include "mem4d/evalkit.hpp"
#include "mem4d/loss.hpp"

namespace mem4d::pipeline {

struct ModelConfig {
  std::size_t image_height = 48;
  std::size_t image_width = 64;
  std::size_t patch = 8;
  std::size_t channels = 48;  // C = C_m = C_s
  std::size_t head_dim = 24;
  Real rope_base = 100;
  std::size_t mlp_ratio = 4;
  std::size_t encoder_layers = 2;
  std::size_t tca_window = 5;  // k_t
  std::size_t tca_layers = 4;
  std::size_t tdm_memory = 2;  // k_d
  std::size_t pyramid_levels = 3;
  std::size_t tdm_layers = 4;
  std::size_t psm_capacity = 16;  // k_s
  std::size_t psm_layers = 4;
  std::size_t readout_stages = 4;  // L_read
  Real fov_max_degrees = 120;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t grid_height() const { return image_height / patch; }
  std::size_t grid_width() const { return image_width / patch; }
  nn::AttentionConfig attention() const { return {channels, head_dim, rope_base, mlp_ratio}; }
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Which memory paths a model instance has. A module that is switched off is
/// not constructed, so its parameters are absent from the registry.
struct Wiring {
  bool tca = true;
  bool tdm = true;
  bool psm = true;
  bool unified = false;  // TDM tokens join the PSM bank; only spatial read blocks run

  nlohmann::json to_json() const;
  static Wiring from_json(const nlohmann::json& j);
  bool operator==(const Wiring&) const = default;
};

class Model {
 public:
  explicit Model(const ModelConfig& config, Wiring wiring = {});
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  const Wiring& wiring() const { return wiring_; }
  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }

  /// Patch embedding plus encoder blocks; positions (0, y, x).
  nn::TokenGrid encode(const Tensor& image) const;

  const tca::TemporalContextAggregator& tca() const { return tca_; }
  const tdm::DynamicsMemoryBuilder& tdm() const { return tdm_; }
  const psm::StructureEncoder& structure_encoder() const { return structure_encoder_; }
  const psm::StructureCompressor& structure_compressor() const { return compressor_; }
  const decoder::Decoder& decoder() const { return decoder_; }

 private:
  ModelConfig config_;
  Wiring wiring_;
  nn::ParamStore store_;
  nn::PatchEmbed embed_;
  nn::AttentionStack encoder_;
  tca::TemporalContextAggregator tca_;
  tdm::DynamicsMemoryBuilder tdm_;
  psm::StructureEncoder structure_encoder_;
  psm::StructureCompressor compressor_;
  decoder::Decoder decoder_;
};

/// Everything a stream carries between frames. Advances only through process_frame.
struct StreamState {
  long t = 0;                      // frames processed so far
  tca::HistoryWindow history;      // encoder grids F, capacity k_t
  tca::HistoryWindow recent;       // enriched grids T', capacity k_d
  psm::PersistentStructureMemory psm;

  explicit StreamState(const ModelConfig& config)
      : history(config.tca_window), recent(config.tdm_memory), psm(config.psm_capacity) {}
};

struct FrameTrace {
  tca::TcaTrace tca;
  decoder::ReadoutTrace readout;
  std::size_t dynamics_entries = 0;
  std::size_t bank_tokens = 0;
};

/// One streaming step: encode, aggregate, build TDM, compress PSM, read out,
/// predict, then update the memories. Throws InputError on bad image extents
/// and StreamError on non-finite outputs (state left untouched in both cases).
/// `structure_input` replaces the predicted global pointmap pushed into the
/// PSM; the push never carries gradients either way.
decoder::FramePrediction process_frame(const Model& model, StreamState& state, const Tensor& image,
                                       FrameTrace* trace = nullptr, const Tensor* structure_input = nullptr);

/// Serializes stream memories (values only; no tape links survive).
Checkpoint state_to_checkpoint(const StreamState& state);
StreamState state_from_checkpoint(const Checkpoint& ckpt, const ModelConfig& config);

/// Model inputs and targets for one sequence.
struct SequenceTensors {
  std::string name;
  std::vector<Tensor> images;  // H x W x 3, scaled to [-1, 1]
  std::vector<loss::GroundTruthFrame> truth;
};
SequenceTensors to_tensors(const scene::Sequence& sequence);

/// Streams a whole sequence without recording gradients.
eval::PredictedSequence stream_sequence(const Model& model, const SequenceTensors& sequence,
                                        std::vector<decoder::FramePrediction>* raw = nullptr);

/// Streams and evaluates every sequence.
std::vector<eval::SequenceMetrics> evaluate_model(const Model& model, const std::vector<scene::Sequence>& sequences,
                                                  const eval::EvalOptions& options = {});

/// ASCII PLY with x y z, confidence and 8-bit rgb per vertex. `rgb` may be
/// empty (grey).
void write_ply(const std::filesystem::path& path, const std::vector<double>& points,
               const std::vector<double>& confidence, const std::vector<float>& rgb);

/// Parameter checkpoints: entries "param/<name>", meta {model, wiring, ...}.
Checkpoint model_checkpoint(const Model& model);
std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt);
void load_parameters(Model& model, const Checkpoint& ckpt);

}  // namespace mem4d::pipeline
