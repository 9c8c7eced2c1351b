#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "kddetr/ground_truth.hpp"

namespace kddetr {

struct SceneObject {
  int cls = 0;
  BoxCxCyWH box;

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

// One synthetic image (HWC, image_size^2 * 3 values in [0, 1]) and its
// annotations. Every value is representable as a 32-bit float so that the
// on-disk format round-trips exactly.
struct SceneSample {
  std::vector<float> image;
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;

  GroundTruth ground_truth() const;
  friend bool operator==(const SceneSample&, const SceneSample&) = default;
};

struct SceneSpec {
  int num_classes = 3;  // shape vocabulary: 0 square, 1 disk, 2 cross
  int max_objects = 5;
  int image_size = 32;
  double min_side = 0.15;
  double max_side = 0.5;
  double noise_sigma = 0.05;
  double max_pair_iou = 0.3;
};

// Deterministic per-scene seed derived from (dataset seed, index).
std::uint64_t scene_seed(std::uint64_t seed, std::uint64_t index);

SceneSample generate_scene(std::uint64_t seed, std::uint64_t index, const SceneSpec& spec = {});

// Scenes [first, first + count) of the stream `seed`.
std::vector<SceneSample> generate(std::uint64_t seed, int count, const SceneSpec& spec = {},
                                  std::uint64_t first = 0);

struct DatasetHeader {
  std::uint64_t seed = 0;
  int count = 0;
  int num_classes = 3;
  int image_size = 32;
  int max_objects = 5;
};

// Split file layout (all integers and reals little-endian):
//   "KDDS" | u32 version=1 | u64 header_bytes | JSON header
//   per sample: u64 seed | f32 image[image_size*image_size*3] (HWC)
//               | u32 n | n * (u32 class, f32 cx, f32 cy, f32 w, f32 h)
void write_dataset(const std::filesystem::path& path, const DatasetHeader& header,
                   std::span<const SceneSample> samples);
std::vector<SceneSample> read_dataset(const std::filesystem::path& path,
                                      DatasetHeader* header = nullptr);

std::vector<GroundTruth> ground_truths(std::span<const SceneSample> samples);

}  // namespace kddetr
