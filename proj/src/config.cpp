#include "kddetr/config.hpp"

#include <fstream>

#include "kddetr/errors.hpp"
#include "kddetr/rng.hpp"

namespace kddetr {

using nlohmann::json;

void RunConfig::validate() const {
  teacher.validate();
  student.validate();
  loss.validate();
  if (teacher.hidden_dim != student.hidden_dim) {
    throw ConfigError("teacher and student hidden_dim differ (" +
                      std::to_string(teacher.hidden_dim) + " vs " +
                      std::to_string(student.hidden_dim) + "); shared points need one width");
  }
  if (teacher.num_classes != student.num_classes) {
    throw ConfigError("teacher and student num_classes differ");
  }
  if (teacher.image_size != student.image_size || teacher.patch_size != student.patch_size) {
    throw ConfigError("teacher and student must read the same image geometry");
  }
  if (data.max_objects < 0 || data.max_objects > teacher.num_queries ||
      data.max_objects > student.num_queries) {
    throw ConfigError("max_objects must lie in [0, num_queries]");
  }
  if (teacher.num_classes > 3) throw ConfigError("scene generator supports at most 3 classes");
  if (distill.general_points < 0) throw ConfigError("general_points must be >= 0");
  if (distill.extra_plain_queries < 0) throw ConfigError("extra_plain_queries must be >= 0");
  if (distill.ratio < 0 || distill.detection_weight < 0) {
    throw ConfigError("loss mixing weights must be >= 0");
  }
  if (!(optim.lr > 0)) throw ConfigError("lr must be positive");
  if (optim.lr_drop_fraction < 0 || optim.lr_drop_fraction > 1) {
    throw ConfigError("lr_drop_fraction must lie in [0, 1]");
  }
  if (optim.teacher_steps < 0 || optim.student_steps < 0) throw ConfigError("steps must be >= 0");
  if (optim.batch < 1) throw ConfigError("batch must be >= 1");
  if (data.teacher_train_size < 1 || data.student_train_size < 1 || data.val_size < 1) {
    throw ConfigError("dataset sizes must be >= 1");
  }
  if (data.val_seed == data.teacher_train_seed || data.val_seed == data.student_train_seed) {
    throw ConfigError("validation seed must differ from training seeds");
  }
  if (eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
}

json to_json(const ModelConfig& c) {
  return {{"image_size", c.image_size},         {"patch_size", c.patch_size},
          {"hidden_dim", c.hidden_dim},         {"num_heads", c.num_heads},
          {"encoder_layers", c.encoder_layers}, {"decoder_layers", c.decoder_layers},
          {"ffn_dim", c.ffn_dim},               {"num_queries", c.num_queries},
          {"num_classes", c.num_classes}};
}

json to_json(const RunConfig& c) {
  return {
      {"teacher", to_json(c.teacher)},
      {"student", to_json(c.student)},
      {"loss",
       {{"cls", c.loss.cls},
        {"l1", c.loss.l1},
        {"giou", c.loss.giou},
        {"temperature", c.loss.temperature},
        {"no_object_weight", c.loss.no_object_weight}}},
      {"distill",
       {{"strategy", to_string(c.distill.strategy)},
        {"use_fgw", c.distill.use_fgw},
        {"general_points", c.distill.general_points},
        {"resample_general_points", c.distill.resample_general_points},
        {"extra_plain_queries", c.distill.extra_plain_queries},
        {"ratio", c.distill.ratio},
        {"detection_weight", c.distill.detection_weight}}},
      {"optim",
       {{"lr", c.optim.lr},
        {"lr_drop_factor", c.optim.lr_drop_factor},
        {"lr_drop_fraction", c.optim.lr_drop_fraction},
        {"grad_clip", c.optim.grad_clip},
        {"teacher_steps", c.optim.teacher_steps},
        {"student_steps", c.optim.student_steps},
        {"batch", c.optim.batch}}},
      {"data",
       {{"teacher_train_seed", c.data.teacher_train_seed},
        {"student_train_seed", c.data.student_train_seed},
        {"val_seed", c.data.val_seed},
        {"teacher_train_size", c.data.teacher_train_size},
        {"student_train_size", c.data.student_train_size},
        {"val_size", c.data.val_size},
        {"max_objects", c.data.max_objects}}},
      {"seed", c.seed},
      {"eval_interval", c.eval_interval},
      {"out_dir", c.out_dir},
  };
}

namespace {

void reject_unknown(const json& defaults, const json& given, const std::string& where) {
  if (!given.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : given.items()) {
    const auto it = defaults.find(key);
    if (it == defaults.end()) throw ConfigError("unknown config key '" + where + key + "'");
    if (it->is_object()) reject_unknown(*it, value, where + key + ".");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

}  // namespace

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  read(j, "image_size", c.image_size);
  read(j, "patch_size", c.patch_size);
  read(j, "hidden_dim", c.hidden_dim);
  read(j, "num_heads", c.num_heads);
  read(j, "encoder_layers", c.encoder_layers);
  read(j, "decoder_layers", c.decoder_layers);
  read(j, "ffn_dim", c.ffn_dim);
  read(j, "num_queries", c.num_queries);
  read(j, "num_classes", c.num_classes);
  return c;
}

RunConfig run_config_from_json(const json& overrides) {
  json merged = to_json(RunConfig{});
  if (!overrides.is_null()) {
    reject_unknown(merged, overrides, "");
    merged.merge_patch(overrides);
  }
  RunConfig c;
  c.teacher = model_config_from_json(merged.at("teacher"));
  c.student = model_config_from_json(merged.at("student"));
  const json& l = merged.at("loss");
  read(l, "cls", c.loss.cls);
  read(l, "l1", c.loss.l1);
  read(l, "giou", c.loss.giou);
  read(l, "temperature", c.loss.temperature);
  read(l, "no_object_weight", c.loss.no_object_weight);
  const json& d = merged.at("distill");
  std::string strategy;
  read(d, "strategy", strategy);
  c.distill.strategy = strategy_from_string(strategy);
  read(d, "use_fgw", c.distill.use_fgw);
  read(d, "general_points", c.distill.general_points);
  read(d, "resample_general_points", c.distill.resample_general_points);
  read(d, "extra_plain_queries", c.distill.extra_plain_queries);
  read(d, "ratio", c.distill.ratio);
  read(d, "detection_weight", c.distill.detection_weight);
  const json& o = merged.at("optim");
  read(o, "lr", c.optim.lr);
  read(o, "lr_drop_factor", c.optim.lr_drop_factor);
  read(o, "lr_drop_fraction", c.optim.lr_drop_fraction);
  read(o, "grad_clip", c.optim.grad_clip);
  read(o, "teacher_steps", c.optim.teacher_steps);
  read(o, "student_steps", c.optim.student_steps);
  read(o, "batch", c.optim.batch);
  const json& dt = merged.at("data");
  read(dt, "teacher_train_seed", c.data.teacher_train_seed);
  read(dt, "student_train_seed", c.data.student_train_seed);
  read(dt, "val_seed", c.data.val_seed);
  read(dt, "teacher_train_size", c.data.teacher_train_size);
  read(dt, "student_train_size", c.data.student_train_size);
  read(dt, "val_size", c.data.val_size);
  read(dt, "max_objects", c.data.max_objects);
  read(merged, "seed", c.seed);
  read(merged, "eval_interval", c.eval_interval);
  read(merged, "out_dir", c.out_dir);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

std::uint64_t config_hash(const RunConfig& c) {
  const std::string text = to_json(c).dump();
  return fnv1a(text.data(), text.size());
}

}  // namespace kddetr
