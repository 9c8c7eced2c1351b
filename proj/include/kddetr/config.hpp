#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "kddetr/losses.hpp"
#include "kddetr/model.hpp"
#include "kddetr/points.hpp"

namespace kddetr {

struct DistillSettings {
  Strategy strategy = Strategy::combined;
  bool use_fgw = true;
  int general_points = 20;
  bool resample_general_points = false;  // redraw once per pass over the data
  int extra_plain_queries = 0;           // student gets N + extra detection queries
  double ratio = 1.0;                    // weight of the distillation loss
  double detection_weight = 1.0;         // weight of the student's own detection loss
};

struct OptimSettings {
  double lr = 1e-3;
  double lr_drop_factor = 0.1;   // multiplied into lr after lr_drop_fraction of the steps
  double lr_drop_fraction = 0.75;
  double grad_clip = 0.1;        // <= 0 disables clipping
  int teacher_steps = 16000;
  int student_steps = 4000;
  int batch = 8;
};

struct DataSettings {
  std::uint64_t teacher_train_seed = 11;
  std::uint64_t student_train_seed = 12;
  std::uint64_t val_seed = 13;
  int teacher_train_size = 4000;
  int student_train_size = 4000;
  int val_size = 500;
  int max_objects = 5;
};

struct RunConfig {
  ModelConfig teacher = ModelConfig::teacher();
  ModelConfig student = ModelConfig::student();
  LossWeights loss;
  DistillSettings distill;
  OptimSettings optim;
  DataSettings data;
  std::uint64_t seed = 1;
  int eval_interval = 500;
  std::string out_dir = "runs";

  // Throws ConfigError on any inconsistent field.
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const RunConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Defaults overlaid field by field with `overrides` (a possibly partial
// object). Unknown keys are rejected with ConfigError.
RunConfig run_config_from_json(const nlohmann::json& overrides);
RunConfig load_run_config(const std::filesystem::path& path);

// Stable 64-bit digest of the canonical JSON form.
std::uint64_t config_hash(const RunConfig& c);

}  // namespace kddetr
