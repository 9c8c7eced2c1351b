// kddetr command-line interface. Every subcommand prints exactly one JSON
// line on stdout; progress goes to stderr.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "kddetr/ablation.hpp"
#include "kddetr/checkpoint.hpp"
#include "kddetr/config.hpp"
#include "kddetr/errors.hpp"
#include "kddetr/gradcheck.hpp"
#include "kddetr/runtime.hpp"
#include "kddetr/scene.hpp"
#include "kddetr/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kddetr;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> sets;
};

// "a.b.c=VALUE" -> {"a": {"b": {"c": VALUE}}}; VALUE is parsed as JSON and
// falls back to a plain string.
json patch_from_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + text + "'");
  json value;
  try {
    value = json::parse(text.substr(eq + 1));
  } catch (const json::exception&) {
    value = text.substr(eq + 1);
  }
  std::vector<std::string> keys;
  std::stringstream ss(text.substr(0, eq));
  for (std::string k; std::getline(ss, k, '.');) keys.push_back(k);
  for (auto it = keys.rbegin(); it != keys.rend(); ++it) value = json{{*it, value}};
  return value;
}

RunConfig resolve_config(const Globals& g) {
  json overrides = json::object();
  if (!g.config_path.empty()) {
    std::ifstream is(g.config_path);
    if (!is) throw ConfigError("cannot open config " + g.config_path);
    try {
      overrides = json::parse(is);
    } catch (const json::exception& e) {
      throw ConfigError("config " + g.config_path + ": " + e.what());
    }
  }
  for (const auto& s : g.sets) overrides.merge_patch(patch_from_assignment(s));
  if (g.seed) overrides["seed"] = *g.seed;
  if (g.out) overrides["out_dir"] = *g.out;
  return run_config_from_json(overrides);
}

void log_progress(const char* who, const json& row) {
  std::cerr << who << " step " << row.at("step") << " map " << row.at("map").get<double>()
            << " ap50 " << row.at("ap50").get<double>() << '\n';
}

Dataset val_split(const RunConfig& cfg) {
  return generate_split(cfg.data.val_seed, cfg.data.val_size, cfg.teacher, cfg.data.max_objects);
}

json metrics_only(const json& m) {
  json out = m;
  out.erase("history");
  return out;
}

void emit(const json& j) { std::cout << j.dump() << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"kddetr: toy DETR with consistent distillation points"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON run config (partial; defaults fill the rest)");
  app.add_option("--seed", g.seed, "run seed");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--set", g.sets, "field override, e.g. optim.lr=5e-4 (repeatable)");

  auto* show = app.add_subcommand("config", "print the resolved run config");

  auto* gen = app.add_subcommand("gen-data", "write the teacher/student training and validation splits");

  auto* teach = app.add_subcommand("train-teacher", "detection-only teacher training");

  auto* student = app.add_subcommand("train-student", "baseline student without distillation");

  std::string teacher_path;
  std::string strategy_name;
  std::optional<int> general_points;
  bool no_fgw = false;
  auto* distill = app.add_subcommand("distill", "student training with distillation");
  distill->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  distill->add_option("--strategy", strategy_name,
                      "combined, general, specific, inconsistent, similar_foreground, "
                      "similar_general");
  distill->add_option("--general-points", general_points, "number of general points M_g");
  distill->add_flag("--no-fgw", no_fgw, "disable foreground weighting");

  std::string model_path, data_path;
  auto* eval = app.add_subcommand("eval", "AP of a checkpoint on a dataset split");
  eval->add_option("--model", model_path, "checkpoint")->required();
  eval->add_option("--data", data_path, "dataset file (default: validation split from config)");

  int gc_seeds = 20;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gradcheck->add_option("--seeds", gc_seeds, "random instances per check");

  std::string suite;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string ablate_teacher;
  auto* ablate = app.add_subcommand("ablate", "run an ablation suite");
  ablate->add_option("--suite", suite, "consistency, strategies, point_counts, query_control")
      ->required();
  ablate->add_option("--seeds", seeds, "comma-separated seeds")->delimiter(',');
  ablate->add_option("--teacher", ablate_teacher, "teacher checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const RunConfig cfg = resolve_config(g);
    const fs::path out_dir = cfg.out_dir;

    if (*show) {
      emit(to_json(cfg));
      return 0;
    }

    if (*gen) {
      fs::create_directories(out_dir);
      json files = json::object();
      auto write = [&](const char* name, std::uint64_t seed, int count) {
        const Dataset d = generate_split(seed, count, cfg.teacher, cfg.data.max_objects);
        const fs::path p = out_dir / name;
        write_dataset(p, {seed, count, cfg.teacher.num_classes, cfg.teacher.image_size,
                          cfg.data.max_objects},
                      d.samples);
        files[name] = {{"path", p.string()}, {"count", count}, {"seed", seed}};
      };
      write("teacher_train.bin", cfg.data.teacher_train_seed, cfg.data.teacher_train_size);
      write("student_train.bin", cfg.data.student_train_seed, cfg.data.student_train_size);
      write("val.bin", cfg.data.val_seed, cfg.data.val_size);
      emit({{"command", "gen-data"}, {"files", files}});
      return 0;
    }

    if (*teach) {
      const Dataset train = generate_split(cfg.data.teacher_train_seed, cfg.data.teacher_train_size,
                                           cfg.teacher, cfg.data.max_objects);
      const Dataset val = val_split(cfg);
      TrainResult r = train_teacher(cfg, train, val, [](const json& row) { log_progress("teacher", row); });
      const fs::path p = out_dir / "teacher.kddt";
      save_checkpoint(p, make_checkpoint(r.model, "teacher", to_json(cfg), nullptr, r.metrics));
      std::cerr << "teacher wall_seconds " << r.wall_seconds << '\n';
      emit({{"command", "train-teacher"}, {"checkpoint", p.string()},
            {"metrics", metrics_only(r.metrics)}});
      return 0;
    }

    if (*student || *distill) {
      RunConfig c = cfg;
      std::optional<DetrModel> teacher;
      if (*student) {
        c.distill.strategy = Strategy::none;
      } else {
        if (!strategy_name.empty()) c.distill.strategy = strategy_from_string(strategy_name);
        if (general_points) c.distill.general_points = *general_points;
        if (no_fgw) c.distill.use_fgw = false;
        c.validate();
        if (c.distill.strategy == Strategy::none) {
          throw SetupError("distill needs a distillation strategy; use train-student for none");
        }
        teacher.emplace(model_from_checkpoint(load_checkpoint(teacher_path)));
      }
      const Dataset train = generate_split(c.data.student_train_seed, c.data.student_train_size,
                                           c.student, c.data.max_objects);
      const Dataset val = val_split(c);
      TrainResult r = train_student(c, teacher ? &*teacher : nullptr, train, val,
                                    [](const json& row) { log_progress("student", row); });
      const fs::path p = out_dir / "student.kddt";
      save_checkpoint(p, make_checkpoint(r.model, "student", to_json(c),
                                         r.points ? &*r.points : nullptr, r.metrics));
      std::cerr << "student wall_seconds " << r.wall_seconds << '\n';
      emit({{"command", *student ? "train-student" : "distill"},
            {"strategy", to_string(c.distill.strategy)},
            {"checkpoint", p.string()},
            {"metrics", metrics_only(r.metrics)}});
      return 0;
    }

    if (*eval) {
      const Checkpoint ck = load_checkpoint(model_path);
      const DetrModel model = model_from_checkpoint(ck);
      const Dataset data = data_path.empty() ? val_split(cfg) : make_dataset(read_dataset(data_path));
      const ApResult ap = evaluate(model, data);
      json j = ap_json(ap);
      j["command"] = "eval";
      j["images"] = data.size();
      j["kind"] = ck.kind;
      emit(j);
      return 0;
    }

    if (*gradcheck) {
      bool all = true;
      json checks = json::array();
      for (const auto& r : run_gradcheck_suite(gc_seeds)) {
        all = all && r.passed();
        std::fprintf(stderr, "%-18s %s  max_rel_error %.3e  (tol %.0e)\n", r.name.c_str(),
                     r.passed() ? "PASS" : "FAIL", r.max_rel_error, r.tolerance);
        checks.push_back({{"name", r.name}, {"passed", r.passed()},
                          {"max_rel_error", r.max_rel_error}, {"tolerance", r.tolerance}});
      }
      emit({{"command", "gradcheck"}, {"seeds", gc_seeds}, {"passed", all}, {"checks", checks}});
      return all ? 0 : 1;
    }

    if (*ablate) {
      const DetrModel teacher = model_from_checkpoint(load_checkpoint(ablate_teacher));
      const Dataset train = generate_split(cfg.data.student_train_seed, cfg.data.student_train_size,
                                           cfg.student, cfg.data.max_objects);
      const Dataset val = val_split(cfg);
      AblationOptions opt;
      opt.suite = suite;
      opt.seeds = seeds;
      opt.cache_dir = out_dir / "cells";
      opt.on_cell = [](const CellResult& c) {
        std::cerr << c.variant << " seed " << c.seed << (c.ok ? " map " : " FAILED ")
                  << (c.ok ? std::to_string(c.map) : c.error) << (c.cached ? " (cached)" : "")
                  << '\n';
      };
      const auto cells = run_ablation(cfg, teacher, train, val, opt);
      fs::create_directories(out_dir);
      const fs::path csv = out_dir / (suite + ".csv");
      std::ofstream(csv) << ablation_csv(cells);
      json summary = json::array();
      for (const auto& s : summarize(cells)) summary.push_back(summary_json(s));
      int failed = 0;
      for (const auto& c : cells) failed += c.ok ? 0 : 1;
      emit({{"command", "ablate"}, {"suite", suite}, {"csv", csv.string()},
            {"failed_cells", failed}, {"summary", summary}});
      return failed == 0 ? 0 : 1;
    }
  } catch (const std::exception& e) {
    emit({{"error", e.what()}});
    return 1;
  }
  return 2;
}
