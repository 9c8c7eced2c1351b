#include "kddetr/points.hpp"

#include <algorithm>
#include <array>

#include "kddetr/errors.hpp"
#include "kddetr/rng.hpp"

namespace kddetr {

namespace {

constexpr std::array<std::pair<Strategy, const char*>, 7> kNames = {{
    {Strategy::none, "none"},
    {Strategy::combined, "combined"},
    {Strategy::general_only, "general"},
    {Strategy::specific_only, "specific"},
    {Strategy::inconsistent, "inconsistent"},
    {Strategy::similar_foreground, "similar_foreground"},
    {Strategy::similar_general, "similar_general"},
}};

}  // namespace

std::string to_string(Strategy s) {
  for (const auto& [value, name] : kNames) {
    if (value == s) return name;
  }
  return "unknown";
}

Strategy strategy_from_string(const std::string& name) {
  for (const auto& [value, n] : kNames) {
    if (name == n) return value;
  }
  if (name == "general_only") return Strategy::general_only;
  if (name == "specific_only") return Strategy::specific_only;
  throw ConfigError("unknown distillation strategy '" + name + "'");
}

bool uses_shared_points(Strategy s) {
  return s == Strategy::combined || s == Strategy::general_only || s == Strategy::specific_only;
}

bool needs_teacher_queries(Strategy s) {
  return s == Strategy::combined || s == Strategy::specific_only;
}

int DistillationPointSet::general_count() const {
  return static_cast<int>(std::count(provenance.begin(), provenance.end(), Provenance::general));
}

std::uint64_t DistillationPointSet::hash() const {
  if (!points.defined()) return fnv1a(nullptr, 0);
  const auto v = points.values();
  return fnv1a(v.data(), v.size_bytes());
}

ag::Tensor sample_general(int count, int dim, std::uint64_t seed) {
  if (count < 0) throw ConfigError("general point count must be non-negative");
  if (count == 0) return {};
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(count) * dim);
  for (auto& x : v) x = rng.uniform();
  return ag::Tensor::from({count, dim}, std::move(v), false);
}

ag::Tensor sample_specific(const DetrModel& teacher, std::optional<int> student_dim) {
  const int dim = teacher.config().hidden_dim;
  if (student_dim && *student_dim != dim) {
    throw SetupError("teacher query width " + std::to_string(dim) +
                     " differs from student width " + std::to_string(*student_dim));
  }
  return teacher.query_embeddings().detach();
}

DistillationPointSet build_points(Strategy strategy, int general_count, std::uint64_t seed,
                                  const DetrModel* teacher, std::optional<int> student_dim) {
  DistillationPointSet set;
  set.strategy = strategy;
  if (!uses_shared_points(strategy)) return set;
  if (needs_teacher_queries(strategy) && teacher == nullptr) {
    throw SetupError("strategy '" + to_string(strategy) + "' needs a teacher model");
  }
  int dim = student_dim.value_or(teacher != nullptr ? teacher->config().hidden_dim : 0);
  if (teacher != nullptr && student_dim && teacher->config().hidden_dim != *student_dim) {
    throw SetupError("teacher and student hidden_dim differ; points cannot be shared");
  }
  if (dim <= 0) throw SetupError("point width unknown: pass a teacher or student_dim");

  std::vector<double> values;
  if (strategy != Strategy::specific_only) {
    const ag::Tensor general = sample_general(general_count, dim, seed);
    if (general.defined()) values.assign(general.values().begin(), general.values().end());
    set.provenance.assign(static_cast<std::size_t>(general_count), Provenance::general);
  }
  if (strategy != Strategy::general_only) {
    const ag::Tensor specific = sample_specific(*teacher, dim);
    values.insert(values.end(), specific.values().begin(), specific.values().end());
    set.provenance.insert(set.provenance.end(), static_cast<std::size_t>(specific.dim(0)),
                          Provenance::specific);
  }
  if (!set.provenance.empty()) {
    set.points = ag::Tensor::from({set.size(), dim}, std::move(values), false);
  }
  set.weights.assign(set.provenance.size(), 1.0);
  return set;
}

}  // namespace kddetr
