#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mem4d/scenegen.hpp"

namespace mem4d::scene {

/// On-disk layout of one sequence directory:
///   sequence.json            extents, intrinsics, world-to-camera poses, seed, digest
///   frame_0000.ppm ...       8-bit binary RGB
///   x_global.m4db, x_self.m4db   N x H x W x 3 float32
///   depth.m4db               N x H x W float32
///   mask.m4db, dynamic.m4db  N x H x W float32 in {0, 1}
/// Buffers: "M4DB", u32 version, u32 rank, u64 dims[rank], little-endian float32 data.
inline constexpr std::uint32_t kBufferVersion = 1;
inline constexpr int kSequenceSchema = 1;

struct Sequence {
  std::string name;
  std::uint64_t seed = 0;
  std::size_t height = 0, width = 0;
  std::vector<RenderedFrame> frames;  // primitive / surface_uv are empty after loading
};

Sequence render_sequence(const SceneSpec& spec, const std::string& name);

void write_sequence(const std::filesystem::path& dir, const Sequence& sequence);
Sequence read_sequence(const std::filesystem::path& dir);

/// Writes `count` sequences named seq_000, seq_001, ... under `root`; the
/// i-th scene uses sequence_seed(seed, i).
std::vector<std::filesystem::path> generate_dataset(const std::filesystem::path& root, std::size_t count,
                                                    std::uint64_t seed, const SceneConfig& config);
std::uint64_t sequence_seed(std::uint64_t base, std::size_t index);

/// Sequence directories under `root` in name order.
std::vector<std::filesystem::path> list_sequences(const std::filesystem::path& root);

void write_buffer(const std::filesystem::path& path, const std::vector<std::uint64_t>& dims,
                  const std::vector<float>& values);
std::vector<float> read_buffer(const std::filesystem::path& path, std::vector<std::uint64_t>& dims);

void write_ppm(const std::filesystem::path& path, std::size_t height, std::size_t width, const std::vector<float>& rgb);
std::vector<float> read_ppm(const std::filesystem::path& path, std::size_t& height, std::size_t& width);

}  // namespace mem4d::scene
