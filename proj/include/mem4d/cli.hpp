#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "mem4d/runconfig.hpp"

namespace mem4d::cli {

/// Writes paths.out/seq_000.. and returns the sequence directories.
std::vector<std::filesystem::path> cmd_generate(const RunConfig& config);

/// Trains on every sequence under paths.data. Writes checkpoint.m4ck and
/// train_log.jsonl into paths.out and returns the checkpoint path. Stage 2
/// requires paths.init_from.
std::filesystem::path cmd_train(const RunConfig& config, std::ostream* progress = nullptr);

/// Streams paths.sequence through the model in paths.checkpoint. Writes the
/// prediction records, fused.ply and, when `per_frame`, frame_XXXX.ply.
std::filesystem::path cmd_stream(const RunConfig& config, bool per_frame = false);

/// Evaluates paths.predictions (one prediction directory, or a directory of
/// them) against paths.gt and writes paths.out/metrics.json.
std::filesystem::path cmd_eval(const RunConfig& config);

/// Writes ablation.json and ablation.txt into paths.out.
std::filesystem::path cmd_ablate(const RunConfig& config, std::ostream* progress = nullptr);

/// Full command line. Returns 0 on success, 2 on usage or config errors and
/// 1 on any other failure; messages go to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
        const std::map<std::string, std::string>& env);

}  // namespace mem4d::cli
