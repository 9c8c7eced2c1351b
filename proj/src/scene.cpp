#include "kddetr/scene.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "kddetr/errors.hpp"
#include "kddetr/rng.hpp"

namespace kddetr {

namespace {

constexpr char kMagic[4] = {'K', 'D', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

// Per-class fill colors (RGB).
constexpr std::array<std::array<float, 3>, 3> kPalette = {{
    {0.90f, 0.20f, 0.15f},
    {0.15f, 0.85f, 0.25f},
    {0.25f, 0.35f, 0.95f},
}};

float to_f32(double v) { return static_cast<float>(v); }
double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

bool covers(int cls, const BoxCxCyWH& b, double px, double py) {
  const double dx = (px - b.cx) / (0.5 * b.w);
  const double dy = (py - b.cy) / (0.5 * b.h);
  if (std::fabs(dx) > 1.0 || std::fabs(dy) > 1.0) return false;
  switch (cls) {
    case 0:
      return true;
    case 1:
      return dx * dx + dy * dy <= 1.0;
    default:  // plus sign with arms one third of the extent thick
      return std::fabs(dx) <= 1.0 / 3.0 || std::fabs(dy) <= 1.0 / 3.0;
  }
}

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f32(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(os, bits);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw InputError("dataset: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw InputError("dataset: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

float get_f32(std::istream& is) {
  const std::uint32_t bits = get_u32(is);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace

GroundTruth SceneSample::ground_truth() const {
  GroundTruth gt;
  for (const auto& o : objects) {
    gt.classes.push_back(o.cls);
    gt.boxes.push_back(o.box);
  }
  return gt;
}

std::uint64_t scene_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t state = seed * 0x9e3779b97f4a7c15ULL + index;
  splitmix64(state);
  return splitmix64(state) ^ index;
}

SceneSample generate_scene(std::uint64_t seed, std::uint64_t index, const SceneSpec& spec) {
  if (spec.num_classes < 1 || spec.num_classes > 3) {
    throw ConfigError("scene generator supports 1..3 classes");
  }
  if (spec.max_objects < 0) throw ConfigError("max_objects must be non-negative");
  SceneSample sample;
  sample.seed = scene_seed(seed, index);
  Rng rng(sample.seed);

  const int count = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_objects) + 1));
  for (int k = 0; k < count; ++k) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const int cls = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.num_classes)));
      const double side = round_f32(rng.uniform(spec.min_side, spec.max_side));
      const double half = 0.5 * side;
      const double cx = round_f32(rng.uniform(half, 1.0 - half));
      const double cy = round_f32(rng.uniform(half, 1.0 - half));
      const BoxCxCyWH box{cx, cy, side, side};
      const bool clash = std::any_of(sample.objects.begin(), sample.objects.end(),
                                     [&](const SceneObject& o) {
                                       return iou(to_xyxy(o.box), to_xyxy(box)) > spec.max_pair_iou;
                                     });
      if (!clash) {
        sample.objects.push_back({cls, box});
        break;
      }
    }
  }

  const int s = spec.image_size;
  sample.image.assign(static_cast<std::size_t>(s) * s * 3, 0.0f);
  std::vector<double> pixel(static_cast<std::size_t>(s) * s * 3, 0.1);
  for (const auto& o : sample.objects) {
    const auto& color = kPalette[static_cast<std::size_t>(o.cls)];
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        if (!covers(o.cls, o.box, (x + 0.5) / s, (y + 0.5) / s)) continue;
        for (int c = 0; c < 3; ++c) pixel[(static_cast<std::size_t>(y) * s + x) * 3 + c] = color[c];
      }
    }
  }
  for (std::size_t i = 0; i < pixel.size(); ++i) {
    const double v = pixel[i] + spec.noise_sigma * rng.normal();
    sample.image[i] = to_f32(std::clamp(v, 0.0, 1.0));
  }
  return sample;
}

std::vector<SceneSample> generate(std::uint64_t seed, int count, const SceneSpec& spec,
                                  std::uint64_t first) {
  if (count < 1) throw ConfigError("dataset count must be at least 1");
  std::vector<SceneSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(generate_scene(seed, first + i, spec));
  return out;
}

std::vector<GroundTruth> ground_truths(std::span<const SceneSample> samples) {
  std::vector<GroundTruth> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.ground_truth());
  return out;
}

void write_dataset(const std::filesystem::path& path, const DatasetHeader& header,
                   std::span<const SceneSample> samples) {
  if (static_cast<std::size_t>(header.count) != samples.size()) {
    throw ContractError("write_dataset: header count does not match sample count");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  const nlohmann::json j = {{"seed", header.seed},
                            {"count", header.count},
                            {"num_classes", header.num_classes},
                            {"image_size", header.image_size},
                            {"max_objects", header.max_objects}};
  const std::string text = j.dump();
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const std::size_t pixels = static_cast<std::size_t>(header.image_size) * header.image_size * 3;
  for (const auto& s : samples) {
    if (s.image.size() != pixels) throw ContractError("write_dataset: image size mismatch");
    put_u64(os, s.seed);
    for (float v : s.image) put_f32(os, v);
    put_u32(os, static_cast<std::uint32_t>(s.objects.size()));
    for (const auto& o : s.objects) {
      put_u32(os, static_cast<std::uint32_t>(o.cls));
      put_f32(os, to_f32(o.box.cx));
      put_f32(os, to_f32(o.box.cy));
      put_f32(os, to_f32(o.box.w));
      put_f32(os, to_f32(o.box.h));
    }
  }
  if (!os) throw InputError("failed writing " + path.string());
}

std::vector<SceneSample> read_dataset(const std::filesystem::path& path, DatasetHeader* header) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open dataset " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kMagic)) {
    throw InputError(path.string() + " is not a dataset file");
  }
  if (get_u32(is) != kVersion) throw InputError("unsupported dataset version");
  const std::uint64_t len = get_u64(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) {
    throw InputError("dataset: truncated header");
  }
  DatasetHeader h;
  try {
    const auto j = nlohmann::json::parse(text);
    h.seed = j.at("seed").get<std::uint64_t>();
    h.count = j.at("count").get<int>();
    h.num_classes = j.at("num_classes").get<int>();
    h.image_size = j.at("image_size").get<int>();
    h.max_objects = j.value("max_objects", 5);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("dataset header: ") + e.what());
  }
  const std::size_t pixels = static_cast<std::size_t>(h.image_size) * h.image_size * 3;
  std::vector<SceneSample> samples(static_cast<std::size_t>(h.count));
  for (auto& s : samples) {
    s.seed = get_u64(is);
    s.image.resize(pixels);
    for (auto& v : s.image) v = get_f32(is);
    const std::uint32_t n = get_u32(is);
    for (std::uint32_t k = 0; k < n; ++k) {
      SceneObject o;
      o.cls = static_cast<int>(get_u32(is));
      o.box.cx = get_f32(is);
      o.box.cy = get_f32(is);
      o.box.w = get_f32(is);
      o.box.h = get_f32(is);
      s.objects.push_back(o);
    }
  }
  if (header != nullptr) *header = h;
  return samples;
}

}  // namespace kddetr
