#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kddetr/model.hpp"
#include "kddetr/tensor.hpp"

namespace kddetr {

enum class Strategy {
  none,                // no distillation (baseline student)
  combined,            // general + specific shared points
  general_only,
  specific_only,
  inconsistent,        // each model's own queries paired index-wise
  similar_foreground,  // GT-matched queries paired by GT order
  similar_general,     // similar_foreground + averaged negatives pair
};

std::string to_string(Strategy s);
// Throws ConfigError for unknown names.
Strategy strategy_from_string(const std::string& name);

// Strategies whose points are shared query vectors (as opposed to the
// baselines, which pair each model's own detection outputs).
bool uses_shared_points(Strategy s);
bool needs_teacher_queries(Strategy s);

enum class Provenance { general, specific };

// Query set fed unchanged to both teacher and student. Points never require
// grad and are never handed to an optimizer.
struct DistillationPointSet {
  ag::Tensor points;  // [M, D]; undefined when M == 0
  std::vector<Provenance> provenance;
  std::vector<double> weights;  // per-point w_i, filled by the loss
  Strategy strategy = Strategy::none;

  int size() const { return static_cast<int>(provenance.size()); }
  bool empty() const { return provenance.empty(); }
  int general_count() const;
  // FNV-1a over the raw bytes of the point values.
  std::uint64_t hash() const;
};

// M_g x D values i.i.d. uniform on [0, 1). Empty (undefined tensor) for 0.
ag::Tensor sample_general(int count, int dim, std::uint64_t seed);

// Frozen copy of the teacher's learned query embeddings. Throws SetupError
// when `student_dim` is given and differs from the teacher width.
ag::Tensor sample_specific(const DetrModel& teacher, std::optional<int> student_dim = {});

// combined -> general block then specific block; general_only / specific_only
// -> that block; none and the three baseline strategies -> empty set (their
// pairs are formed per image at loss time). Throws SetupError when a
// strategy needs teacher queries but `teacher` is null.
DistillationPointSet build_points(Strategy strategy, int general_count, std::uint64_t seed,
                                  const DetrModel* teacher, std::optional<int> student_dim = {});

}  // namespace kddetr
