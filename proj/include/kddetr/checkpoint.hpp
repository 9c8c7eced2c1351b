#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kddetr/model.hpp"
#include "kddetr/points.hpp"

namespace kddetr {

struct StoredTensor {
  std::string name;
  ag::Shape shape;
  std::vector<double> values;
};

// On disk: "KDDT", u32 version, u64 header length, UTF-8 JSON header, then
// the little-endian f64 payload. Header keys: kind, model, run_config,
// tensors [{name, shape, offset}] (offset in bytes from payload start),
// payload_bytes, points (strategy, provenance, hash) when present, metrics.
struct Checkpoint {
  std::string kind;  // "teacher" or "student"
  ModelConfig model;
  nlohmann::json run_config;  // null when not recorded
  std::vector<StoredTensor> tensors;
  std::optional<DistillationPointSet> points;
  nlohmann::json metrics = nlohmann::json::object();
};

Checkpoint make_checkpoint(const DetrModel& model, std::string kind, nlohmann::json run_config,
                           const DistillationPointSet* points, nlohmann::json metrics);

std::string serialize(const Checkpoint& c);
// Throws InputError on malformed bytes.
Checkpoint deserialize(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Rebuilds the model with the stored parameter values. Throws InputError if
// a parameter is missing or has the wrong shape.
DetrModel model_from_checkpoint(const Checkpoint& c);

// FNV-1a over every parameter's raw bytes, in named_parameters order.
std::uint64_t parameter_hash(const DetrModel& model);

}  // namespace kddetr
