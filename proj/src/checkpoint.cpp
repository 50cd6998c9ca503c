#include "mem4d/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace mem4d {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'E', 'M', '4', 'D', 'C', 'K', '\0'};

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

const char* real_dtype() { return sizeof(Real) == 8 ? "f64" : "f32"; }

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

void Checkpoint::add(std::string name, const Tensor& t) { add(std::move(name), t.shape(), t.to_vector()); }

void Checkpoint::add(std::string name, Shape shape, std::vector<Real> values) {
  if (contains(name)) throw ArgumentError("duplicate checkpoint entry " + name);
  if (shape_numel(shape) != values.size()) throw ShapeError("checkpoint entry " + name + " has inconsistent size");
  entries.push_back(Entry{std::move(name), std::move(shape), std::move(values)});
}

const Checkpoint::Entry& Checkpoint::at(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return e;
  throw IoError("checkpoint has no entry named " + name);
}

bool Checkpoint::contains(const std::string& name) const {
  return std::any_of(entries.begin(), entries.end(), [&](const Entry& e) { return e.name == name; });
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string blob;
  nlohmann::json manifest;
  manifest["format"] = "mem4d-checkpoint";
  manifest["version"] = kCheckpointVersion;
  manifest["entries"] = nlohmann::json::array();
  for (const auto& e : ckpt.entries) {
    const std::size_t nbytes = e.values.size() * sizeof(Real);
    manifest["entries"].push_back(
        {{"name", e.name}, {"shape", e.shape}, {"dtype", real_dtype()}, {"offset", blob.size()}, {"nbytes", nbytes}});
    blob.append(reinterpret_cast<const char*>(e.values.data()), nbytes);
  }
  manifest["data_bytes"] = blob.size();
  manifest["checksum"] = hex64(fnv1a64(blob.data(), blob.size()));
  manifest["meta"] = ckpt.meta;
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t mlen = text.size();
  out.write(kMagic, sizeof(kMagic));
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = " in checkpoint " + path.string();
  const std::size_t header = sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() < header || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError("bad magic" + where);
  }
  std::uint32_t version = 0;
  std::uint64_t mlen = 0;
  std::memcpy(&version, bytes.data() + sizeof(kMagic), sizeof(version));
  std::memcpy(&mlen, bytes.data() + sizeof(kMagic) + sizeof(version), sizeof(mlen));
  if (version != kCheckpointVersion) throw IoError("unsupported version " + std::to_string(version) + where);
  if (mlen > bytes.size() - header) throw IoError("manifest length exceeds file size" + where);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(header, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("manifest is not valid JSON") + where + ": " + e.what());
  }
  const std::size_t data_start = header + mlen;
  const std::size_t data_len = bytes.size() - data_start;
  Checkpoint ckpt;
  try {
    if (manifest.at("format") != "mem4d-checkpoint") throw IoError("unknown format" + where);
    if (manifest.at("data_bytes").get<std::size_t>() != data_len) throw IoError("data length mismatch" + where);
    const std::string expected = manifest.at("checksum").get<std::string>();
    if (expected != hex64(fnv1a64(bytes.data() + data_start, data_len))) throw IoError("checksum mismatch" + where);
    for (const auto& e : manifest.at("entries")) {
      const std::string name = e.at("name").get<std::string>();
      const Shape shape = e.at("shape").get<Shape>();
      const std::string dtype = e.at("dtype").get<std::string>();
      const std::size_t offset = e.at("offset").get<std::size_t>();
      const std::size_t nbytes = e.at("nbytes").get<std::size_t>();
      const std::size_t width = dtype == "f64" ? 8 : dtype == "f32" ? 4 : 0;
      if (width == 0) throw IoError("entry " + name + " has unknown dtype " + dtype + where);
      if (offset > data_len || nbytes > data_len - offset) throw IoError("entry " + name + " lies outside the data" + where);
      if (nbytes != shape_numel(shape) * width) throw IoError("entry " + name + " size disagrees with its shape" + where);
      std::vector<Real> values(shape_numel(shape));
      const char* src = bytes.data() + data_start + offset;
      for (std::size_t i = 0; i < values.size(); ++i) {
        if (width == 8) {
          double d;
          std::memcpy(&d, src + 8 * i, 8);
          values[i] = static_cast<Real>(d);
        } else {
          float f;
          std::memcpy(&f, src + 4 * i, 4);
          values[i] = static_cast<Real>(f);
        }
      }
      ckpt.entries.push_back({name, shape, std::move(values)});
    }
    ckpt.meta = manifest.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed manifest") + where + ": " + e.what());
  }
  return ckpt;
}

}  // namespace mem4d
