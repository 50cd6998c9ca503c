#include "mem4d/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "mem4d/errors.hpp"

namespace mem4d::scene {

static_assert(std::endian::native == std::endian::little, "dataset buffers assume a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kBufferMagic[4] = {'M', '4', 'D', 'B'};

std::string frame_name(std::size_t t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%04zu.ppm", t);
  return buf;
}

template <typename T>
std::vector<float> to_float(const std::vector<T>& v) {
  return std::vector<float>(v.begin(), v.end());
}

template <typename Field>
std::vector<float> stack(const Sequence& s, Field field) {
  std::vector<float> out;
  for (const auto& f : s.frames) {
    const auto v = to_float(f.*field);
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

json matrix_json(const Eigen::Matrix3d& m) {
  json rows = json::array();
  for (int r = 0; r < 3; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2)});
  return rows;
}

Eigen::Matrix3d matrix_from(const json& j) {
  Eigen::Matrix3d m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = j.at(r).at(c).get<double>();
  return m;
}

}  // namespace

std::uint64_t sequence_seed(std::uint64_t base, std::size_t index) {
  // splitmix64 step; decorrelates neighbouring indices.
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(index) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

Sequence render_sequence(const SceneSpec& spec, const std::string& name) {
  Sequence s;
  s.name = name;
  s.seed = spec.seed;
  s.height = spec.config.height;
  s.width = spec.config.width;
  for (std::size_t t = 0; t < spec.config.frames; ++t) s.frames.push_back(render_frame(spec, t));
  return s;
}

void write_buffer(const fs::path& path, const std::vector<std::uint64_t>& dims, const std::vector<float>& values) {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  if (n != values.size()) throw ShapeError("buffer " + path.string() + " has inconsistent extents");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const std::uint32_t version = kBufferVersion, rank = static_cast<std::uint32_t>(dims.size());
  out.write(kBufferMagic, 4);
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&rank), 4);
  out.write(reinterpret_cast<const char*>(dims.data()), static_cast<std::streamsize>(8 * dims.size()));
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(4 * values.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<float> read_buffer(const fs::path& path, std::vector<std::uint64_t>& dims) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open buffer: " + path.string());
  char magic[4];
  std::uint32_t version = 0, rank = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&rank), 4);
  if (!in || !std::equal(magic, magic + 4, kBufferMagic)) throw IoError("not an M4DB buffer: " + path.string());
  if (version != kBufferVersion) throw IoError("unsupported buffer version in " + path.string());
  if (rank > 8) throw IoError("implausible buffer rank in " + path.string());
  dims.assign(rank, 0);
  in.read(reinterpret_cast<char*>(dims.data()), 8 * rank);
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  if (!in || n > (std::uint64_t(1) << 32)) throw IoError("truncated buffer header: " + path.string());
  std::vector<float> values(n);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(4 * n));
  if (!in) throw IoError("truncated buffer data: " + path.string());
  in.peek();
  if (!in.eof()) throw IoError("trailing bytes in buffer: " + path.string());
  return values;
}

void write_ppm(const fs::path& path, std::size_t height, std::size_t width, const std::vector<float>& rgb) {
  if (rgb.size() != 3 * height * width) throw ShapeError("ppm: pixel count does not match extents");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "P6\n" << width << " " << height << "\n255\n";
  std::string bytes(rgb.size(), '\0');
  for (std::size_t i = 0; i < rgb.size(); ++i)
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(rgb[i], 0.f, 1.f) * 255.f)));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<float> read_ppm(const fs::path& path, std::size_t& height, std::size_t& width) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image: " + path.string());
  std::string magic;
  int maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (!in || magic != "P6" || maxval != 255 || width == 0 || height == 0) {
    throw IoError("unsupported image (expect binary 8-bit PPM): " + path.string());
  }
  in.get();
  std::string bytes(3 * width * height, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw IoError("truncated image: " + path.string());
  std::vector<float> rgb(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) rgb[i] = static_cast<float>(static_cast<unsigned char>(bytes[i])) / 255.f;
  return rgb;
}

void write_sequence(const fs::path& dir, const Sequence& s) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  const std::uint64_t n = s.frames.size(), h = s.height, w = s.width;

  json meta;
  meta["schema_version"] = kSequenceSchema;
  meta["name"] = s.name;
  meta["seed"] = s.seed;
  meta["height"] = h;
  meta["width"] = w;
  meta["frames"] = json::array();
  for (std::size_t t = 0; t < s.frames.size(); ++t) {
    const auto& f = s.frames[t];
    write_ppm(dir / frame_name(t), s.height, s.width, f.rgb);
    meta["frames"].push_back({{"image", frame_name(t)},
                              {"intrinsics", matrix_json(f.intrinsics)},
                              {"quaternion", {f.rotation.w(), f.rotation.x(), f.rotation.y(), f.rotation.z()}},
                              {"translation", {f.translation.x(), f.translation.y(), f.translation.z()}},
                              {"dynamic_pixels", std::count(f.dynamic.begin(), f.dynamic.end(), 1)}});
  }
  write_buffer(dir / "x_global.m4db", {n, h, w, 3}, stack(s, &RenderedFrame::x_global));
  write_buffer(dir / "x_self.m4db", {n, h, w, 3}, stack(s, &RenderedFrame::x_self));
  write_buffer(dir / "depth.m4db", {n, h, w}, stack(s, &RenderedFrame::depth));
  write_buffer(dir / "mask.m4db", {n, h, w}, stack(s, &RenderedFrame::mask));
  write_buffer(dir / "dynamic.m4db", {n, h, w}, stack(s, &RenderedFrame::dynamic));

  std::ofstream out(dir / "sequence.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "sequence.json").string());
  out << meta.dump(2) << "\n";
}

Sequence read_sequence(const fs::path& dir) {
  const fs::path meta_path = dir / "sequence.json";
  std::ifstream in(meta_path);
  if (!in) throw IoError("missing sequence metadata: " + meta_path.string());
  json meta;
  try {
    meta = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed " + meta_path.string() + ": " + e.what());
  }
  Sequence s;
  try {
    if (meta.at("schema_version").get<int>() != kSequenceSchema) throw IoError("unsupported sequence schema");
    s.name = meta.at("name").get<std::string>();
    s.seed = meta.at("seed").get<std::uint64_t>();
    s.height = meta.at("height").get<std::size_t>();
    s.width = meta.at("width").get<std::size_t>();
    const std::size_t n = meta.at("frames").size();
    const std::size_t px = s.height * s.width;

    auto load = [&](const char* file, std::uint64_t channels) {
      std::vector<std::uint64_t> dims;
      auto v = read_buffer(dir / file, dims);
      std::vector<std::uint64_t> expect{n, s.height, s.width};
      if (channels > 1) expect.push_back(channels);
      if (dims != expect) throw IoError(std::string("extents of ") + file + " disagree with sequence.json");
      return v;
    };
    const auto xg = load("x_global.m4db", 3), xs = load("x_self.m4db", 3), depth = load("depth.m4db", 1),
               mask = load("mask.m4db", 1), dyn = load("dynamic.m4db", 1);

    for (std::size_t t = 0; t < n; ++t) {
      const json& fj = meta["frames"][t];
      RenderedFrame f;
      f.height = s.height;
      f.width = s.width;
      std::size_t ih = 0, iw = 0;
      f.rgb = read_ppm(dir / fj.at("image").get<std::string>(), ih, iw);
      if (ih != s.height || iw != s.width) throw IoError("image extents disagree with sequence.json");
      f.x_global.assign(xg.begin() + 3 * px * t, xg.begin() + 3 * px * (t + 1));
      f.x_self.assign(xs.begin() + 3 * px * t, xs.begin() + 3 * px * (t + 1));
      f.depth.assign(depth.begin() + px * t, depth.begin() + px * (t + 1));
      f.mask.resize(px);
      f.dynamic.resize(px);
      for (std::size_t i = 0; i < px; ++i) {
        f.mask[i] = mask[px * t + i] > 0.5f ? 1 : 0;
        f.dynamic[i] = dyn[px * t + i] > 0.5f ? 1 : 0;
      }
      f.intrinsics = matrix_from(fj.at("intrinsics"));
      const auto& q = fj.at("quaternion");
      f.rotation = Eigen::Quaterniond(q.at(0).get<double>(), q.at(1).get<double>(), q.at(2).get<double>(),
                                      q.at(3).get<double>());
      const auto& tr = fj.at("translation");
      f.translation = Eigen::Vector3d(tr.at(0).get<double>(), tr.at(1).get<double>(), tr.at(2).get<double>());
      s.frames.push_back(std::move(f));
    }
  } catch (const json::exception& e) {
    throw IoError("malformed " + meta_path.string() + ": " + e.what());
  }
  return s;
}

std::vector<fs::path> generate_dataset(const fs::path& root, std::size_t count, std::uint64_t seed,
                                       const SceneConfig& config) {
  std::vector<fs::path> dirs;
  for (std::size_t i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "seq_%03zu", i);
    const SceneSpec spec = generate_scene(sequence_seed(seed, i), config);
    write_sequence(root / name, render_sequence(spec, name));
    dirs.push_back(root / name);
  }
  return dirs;
}

std::vector<fs::path> list_sequences(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("dataset directory not found: " + root.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "sequence.json")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError("no sequences (sequence.json) under " + root.string());
  return out;
}

}  // namespace mem4d::scene
