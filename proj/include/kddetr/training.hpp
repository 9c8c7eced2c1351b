#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "kddetr/average_precision.hpp"
#include "kddetr/config.hpp"
#include "kddetr/model.hpp"
#include "kddetr/points.hpp"
#include "kddetr/scene.hpp"

namespace kddetr {

struct Dataset {
  std::vector<SceneSample> samples;
  std::vector<GroundTruth> truths;

  int size() const { return static_cast<int>(samples.size()); }
};

Dataset make_dataset(std::vector<SceneSample> samples);
Dataset generate_split(std::uint64_t seed, int count, const ModelConfig& model, int max_objects);

// Detection AP of the model's own queries over `data` (no graph recorded).
ApResult evaluate(const DetrModel& model, const Dataset& data, int batch = 50);
nlohmann::json ap_json(const ApResult& ap);

// Per-run consistency audit counters for distillation.
struct DistillAudit {
  long steps = 0;
  long hash_checks = 0;          // teacher-vs-student point hash comparisons
  long hash_mismatches = 0;
  long frozen_checks = 0;        // steps on which the points were checked for gradients
  long frozen_violations = 0;
  bool teacher_unchanged = true;
  std::uint64_t teacher_hash_before = 0;
  std::uint64_t teacher_hash_after = 0;
  std::uint64_t points_hash = 0;  // hash of the initial point set

  bool clean() const {
    return hash_mismatches == 0 && frozen_violations == 0 && teacher_unchanged;
  }
  nlohmann::json to_json() const;
};

struct TrainResult {
  DetrModel model;  // best-by-mAP snapshot (the final one when never evaluated)
  nlohmann::json metrics;
  std::optional<DistillationPointSet> points;
  DistillAudit audit;
  double wall_seconds = 0.0;
};

// Called after every evaluation with {"step", "ap50", "ap75", "map", ...}.
using ProgressFn = std::function<void(const nlohmann::json&)>;

// Detection-only training of cfg.teacher for cfg.optim.teacher_steps.
TrainResult train_teacher(const RunConfig& cfg, const Dataset& train, const Dataset& val,
                          const ProgressFn& progress = {});

// Seed of the student's parameter initialisation for a run.
std::uint64_t student_init_seed(const RunConfig& cfg);

// Trains cfg.student (with cfg.distill.extra_plain_queries added to its
// query count) for cfg.optim.student_steps. With strategy none this is the
// plain baseline; otherwise the teacher is required and stays frozen.
// `initial`, when given, replaces the seeded initialisation. Throws
// SetupError on strategy/teacher mismatch.
TrainResult train_student(const RunConfig& cfg, const DetrModel* teacher, const Dataset& train,
                          const Dataset& val, const ProgressFn& progress = {},
                          const DetrModel* initial = nullptr);

}  // namespace kddetr
