#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kddetr/config.hpp"
#include "kddetr/training.hpp"

namespace kddetr {

struct Variant {
  std::string name;
  std::function<void(RunConfig&)> apply;
};

// Suites: "consistency" (none / inconsistent / similar_foreground /
// similar_general), "strategies" (none, general, general+fgw, specific,
// specific+fgw, combined+fgw), "point_counts" (general+fgw with
// M_g in {2, 5, 10, 20, 60}) and "query_control" (none, N + M plain queries,
// combined+fgw with M points). Throws ConfigError for an unknown suite.
std::vector<Variant> suite_variants(const std::string& suite, const RunConfig& base);
std::vector<std::string> suite_names();

struct CellResult {
  std::string variant;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  int step = 0;
  double ap50 = 0.0;
  double ap75 = 0.0;
  double map = 0.0;
  double wall_seconds = 0.0;
  nlohmann::json audit;  // null for non-distilling cells
  bool cached = false;
};

struct AblationOptions {
  std::string suite;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::optional<std::filesystem::path> cache_dir;  // per-cell JSON results
  std::function<void(const CellResult&)> on_cell;
};

// Runs every variant x seed. A failing cell is recorded with ok = false and
// the suite continues.
std::vector<CellResult> run_ablation(const RunConfig& base, const DetrModel& teacher,
                                     const Dataset& train, const Dataset& val,
                                     const AblationOptions& options);

struct VariantSummary {
  std::string variant;
  int runs = 0;  // successful cells
  double ap50_mean = 0, ap50_std = 0;
  double ap75_mean = 0, ap75_std = 0;
  double map_mean = 0, map_std = 0;
  double wall_mean = 0, wall_std = 0;
};

// Sample standard deviation (n - 1); 0 for a single run. Variants keep their
// first-seen order.
std::vector<VariantSummary> summarize(const std::vector<CellResult>& cells);

// Columns: variant, seed, step, ap50, ap75, map, wall_seconds. Failed cells
// carry "error: ..." in the step column. One "mean±std" row per variant
// follows the per-seed rows.
std::string ablation_csv(const std::vector<CellResult>& cells);

nlohmann::json cell_json(const CellResult& c);
nlohmann::json summary_json(const VariantSummary& s);

}  // namespace kddetr
