#include "kddetr/ablation.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "kddetr/checkpoint.hpp"
#include "kddetr/errors.hpp"

namespace kddetr {

using nlohmann::json;

namespace {

Variant no_distill() {
  return {"none", [](RunConfig& c) { c.distill.strategy = Strategy::none; }};
}

Variant shared(std::string name, Strategy s, bool fgw, std::optional<int> mg = {}) {
  return {std::move(name), [=](RunConfig& c) {
            c.distill.strategy = s;
            c.distill.use_fgw = fgw;
            if (mg) c.distill.general_points = *mg;
          }};
}

Variant baseline(Strategy s) {
  return {to_string(s), [=](RunConfig& c) {
            c.distill.strategy = s;
            c.distill.use_fgw = false;
          }};
}

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::vector<std::string> suite_names() {
  return {"consistency", "strategies", "point_counts", "query_control"};
}

std::vector<Variant> suite_variants(const std::string& suite, const RunConfig& base) {
  if (suite == "consistency") {
    return {no_distill(), baseline(Strategy::inconsistent), baseline(Strategy::similar_foreground),
            baseline(Strategy::similar_general)};
  }
  if (suite == "strategies") {
    return {no_distill(),
            shared("general", Strategy::general_only, false),
            shared("general+fgw", Strategy::general_only, true),
            shared("specific", Strategy::specific_only, false),
            shared("specific+fgw", Strategy::specific_only, true),
            shared("combined+fgw", Strategy::combined, true)};
  }
  if (suite == "point_counts") {
    std::vector<Variant> v;
    for (int mg : {2, 5, 10, 20, 60}) {
      v.push_back(shared("general+fgw/mg=" + std::to_string(mg), Strategy::general_only, true, mg));
    }
    return v;
  }
  if (suite == "query_control") {
    // M = number of combined points, so both arms add the same count.
    const int m = base.distill.general_points + base.teacher.num_queries;
    return {no_distill(),
            {"queries+" + std::to_string(m),
             [m](RunConfig& c) {
               c.distill.strategy = Strategy::none;
               c.distill.extra_plain_queries = m;
             }},
            shared("combined+fgw", Strategy::combined, true)};
  }
  throw ConfigError("unknown suite '" + suite + "'");
}

json cell_json(const CellResult& c) {
  return {{"variant", c.variant}, {"seed", c.seed},   {"ok", c.ok},
          {"error", c.error},     {"step", c.step},   {"ap50", c.ap50},
          {"ap75", c.ap75},       {"map", c.map},     {"wall_seconds", c.wall_seconds},
          {"audit", c.audit}};
}

namespace {

CellResult cell_from_json(const json& j) {
  CellResult c;
  c.variant = j.at("variant");
  c.seed = j.at("seed");
  c.ok = j.at("ok");
  c.error = j.at("error");
  c.step = j.at("step");
  c.ap50 = j.at("ap50");
  c.ap75 = j.at("ap75");
  c.map = j.at("map");
  c.wall_seconds = j.at("wall_seconds");
  c.audit = j.at("audit");
  return c;
}

}  // namespace

std::vector<CellResult> run_ablation(const RunConfig& base, const DetrModel& teacher,
                                     const Dataset& train, const Dataset& val,
                                     const AblationOptions& options) {
  const auto variants = suite_variants(options.suite, base);
  const std::uint64_t teacher_hash = parameter_hash(teacher);
  std::vector<CellResult> out;
  for (const auto& variant : variants) {
    for (std::uint64_t seed : options.seeds) {
      CellResult cell;
      cell.variant = variant.name;
      cell.seed = seed;
      RunConfig cfg = base;
      cfg.seed = seed;
      variant.apply(cfg);

      std::optional<std::filesystem::path> cache_file;
      if (options.cache_dir) {
        char name[64];
        std::snprintf(name, sizeof name, "%016llx.json",
                      static_cast<unsigned long long>(config_hash(cfg) ^ teacher_hash));
        cache_file = *options.cache_dir / name;
      }
      bool hit = false;
      if (cache_file && std::filesystem::exists(*cache_file)) {
        try {
          std::ifstream is(*cache_file);
          cell = cell_from_json(json::parse(is));
          cell.variant = variant.name;
          cell.cached = true;
          hit = cell.ok;
        } catch (const std::exception&) {
          hit = false;
        }
      }
      if (!hit) {
        cell = CellResult{};
        cell.variant = variant.name;
        cell.seed = seed;
        try {
          const TrainResult r = train_student(cfg, cfg.distill.strategy == Strategy::none
                                                       ? nullptr
                                                       : &teacher,
                                              train, val);
          cell.ok = true;
          cell.step = r.metrics.at("best_step");
          cell.ap50 = r.metrics.at("ap50");
          cell.ap75 = r.metrics.at("ap75");
          cell.map = r.metrics.at("map");
          cell.wall_seconds = r.wall_seconds;
          if (r.metrics.contains("audit")) cell.audit = r.metrics.at("audit");
        } catch (const std::exception& e) {
          cell.ok = false;
          cell.error = e.what();
        }
        if (cache_file && cell.ok) {
          std::filesystem::create_directories(cache_file->parent_path());
          std::ofstream os(*cache_file);
          os << cell_json(cell).dump() << '\n';
        }
      }
      if (options.on_cell) options.on_cell(cell);
      out.push_back(std::move(cell));
    }
  }
  return out;
}

std::vector<VariantSummary> summarize(const std::vector<CellResult>& cells) {
  std::vector<VariantSummary> out;
  std::vector<std::vector<const CellResult*>> groups;
  for (const auto& c : cells) {
    std::size_t i = 0;
    while (i < out.size() && out[i].variant != c.variant) ++i;
    if (i == out.size()) {
      out.push_back({c.variant});
      groups.emplace_back();
    }
    if (c.ok) groups[i].push_back(&c);
  }
  auto stats = [](const std::vector<const CellResult*>& g, auto field, double& mean, double& sd) {
    mean = sd = 0.0;
    if (g.empty()) return;
    for (const auto* c : g) mean += field(*c);
    mean /= static_cast<double>(g.size());
    if (g.size() < 2) return;
    for (const auto* c : g) sd += (field(*c) - mean) * (field(*c) - mean);
    sd = std::sqrt(sd / static_cast<double>(g.size() - 1));
  };
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& s = out[i];
    const auto& g = groups[i];
    s.runs = static_cast<int>(g.size());
    stats(g, [](const CellResult& c) { return c.ap50; }, s.ap50_mean, s.ap50_std);
    stats(g, [](const CellResult& c) { return c.ap75; }, s.ap75_mean, s.ap75_std);
    stats(g, [](const CellResult& c) { return c.map; }, s.map_mean, s.map_std);
    stats(g, [](const CellResult& c) { return c.wall_seconds; }, s.wall_mean, s.wall_std);
  }
  return out;
}

json summary_json(const VariantSummary& s) {
  return {{"variant", s.variant},     {"runs", s.runs},         {"ap50_mean", s.ap50_mean},
          {"ap50_std", s.ap50_std},   {"ap75_mean", s.ap75_mean}, {"ap75_std", s.ap75_std},
          {"map_mean", s.map_mean},   {"map_std", s.map_std}};
}

std::string ablation_csv(const std::vector<CellResult>& cells) {
  std::ostringstream os;
  os << "variant,seed,step,ap50,ap75,map,wall_seconds\n";
  for (const auto& c : cells) {
    os << c.variant << ',' << c.seed << ',';
    if (c.ok) {
      os << c.step << ',' << format_real(c.ap50) << ',' << format_real(c.ap75) << ','
         << format_real(c.map) << ',' << format_real(c.wall_seconds) << '\n';
    } else {
      std::string msg = c.error;
      for (auto& ch : msg) {
        if (ch == ',' || ch == '\n' || ch == '"') ch = ' ';
      }
      os << "error: " << msg << ",,,,\n";
    }
  }
  auto pm = [](double m, double s) { return format_real(m) + "±" + format_real(s); };
  for (const auto& s : summarize(cells)) {
    os << s.variant << ",mean±std,," << pm(s.ap50_mean, s.ap50_std) << ','
       << pm(s.ap75_mean, s.ap75_std) << ',' << pm(s.map_mean, s.map_std) << ','
       << pm(s.wall_mean, s.wall_std) << '\n';
  }
  return os.str();
}

}  // namespace kddetr
