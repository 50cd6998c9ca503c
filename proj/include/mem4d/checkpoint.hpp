#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mem4d/tensor.hpp"

namespace mem4d {

/// Named tensors plus free-form metadata, stored as
///
///   "MEM4DCK\0" | u32 version | u64 manifest length | manifest JSON | raw data
///
/// The manifest lists name, shape, dtype ("f64" or "f32"), byte offset and
/// byte length of every entry, the blob length and an FNV-1a checksum of the
/// blob. All binary fields are little-endian.
struct Checkpoint {
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<Real> values;
  };

  std::vector<Entry> entries;
  nlohmann::json meta = nlohmann::json::object();

  void add(std::string name, const Tensor& t);
  void add(std::string name, Shape shape, std::vector<Real> values);
  const Entry& at(const std::string& name) const;
  bool contains(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Throws IoError on unreadable files and on any manifest inconsistency
/// (bad magic, unknown version or dtype, out-of-range offsets, checksum).
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed = 1469598103934665603ull);

}  // namespace mem4d
