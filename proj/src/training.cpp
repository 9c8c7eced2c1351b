#include "kddetr/training.hpp"

#include <chrono>
#include <cmath>
#include <unordered_map>

#include "kddetr/adam.hpp"
#include "kddetr/checkpoint.hpp"
#include "kddetr/errors.hpp"
#include "kddetr/losses.hpp"
#include "kddetr/ops.hpp"
#include "kddetr/rng.hpp"

namespace kddetr {

using ag::Tensor;
using nlohmann::json;

Dataset make_dataset(std::vector<SceneSample> samples) {
  Dataset d;
  d.truths = ground_truths(samples);
  d.samples = std::move(samples);
  return d;
}

Dataset generate_split(std::uint64_t seed, int count, const ModelConfig& model, int max_objects) {
  SceneSpec spec;
  spec.num_classes = model.num_classes;
  spec.image_size = model.image_size;
  spec.max_objects = max_objects;
  return make_dataset(generate(seed, count, spec));
}

namespace {

Tensor batch_patches(const Dataset& d, std::span<const int> idx, const ModelConfig& cfg) {
  std::vector<std::span<const float>> images;
  images.reserve(idx.size());
  for (int i : idx) images.emplace_back(d.samples[static_cast<std::size_t>(i)].image);
  return patchify(images, cfg);
}

std::vector<GroundTruth> batch_truths(const Dataset& d, std::span<const int> idx) {
  std::vector<GroundTruth> out;
  for (int i : idx) out.push_back(d.truths[static_cast<std::size_t>(i)]);
  return out;
}

// Epoch-wise shuffled index stream.
class BatchSampler {
 public:
  BatchSampler(int size, std::uint64_t seed) : rng_(seed), order_(static_cast<std::size_t>(size)) {
    for (int i = 0; i < size; ++i) order_[static_cast<std::size_t>(i)] = i;
    shuffle();
  }

  std::vector<int> next(int batch) {
    std::vector<int> out;
    while (static_cast<int>(out.size()) < batch) {
      if (pos_ == order_.size()) {
        shuffle();
        ++epoch_;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

  int epoch() const { return epoch_; }

 private:
  void shuffle() {
    for (std::size_t i = order_.size(); i > 1; --i) {
      std::swap(order_[i - 1], order_[rng_.below(i)]);
    }
    pos_ = 0;
  }

  Rng rng_;
  std::vector<int> order_;
  std::size_t pos_ = 0;
  int epoch_ = 0;
};

double lr_at(const OptimSettings& o, int step, int total) {
  return step >= static_cast<int>(o.lr_drop_fraction * total) ? o.lr * o.lr_drop_factor : o.lr;
}

void check_finite(double v, int step, const char* what) {
  if (!std::isfinite(v)) {
    throw DivergenceError(std::string(what) + " became non-finite at step " +
                          std::to_string(step) + "; lower optim.lr or tighten optim.grad_clip");
  }
}

class BestTracker {
 public:
  void consider(const DetrModel& model, const ApResult& ap, int step, json extra,
                const ProgressFn& progress) {
    json row = ap_json(ap);
    row["step"] = step;
    for (auto& [k, v] : extra.items()) row[k] = v;
    history_.push_back(row);
    if (progress) progress(row);
    if (ap.map > best_map_) {
      best_map_ = ap.map;
      best_step_ = step;
      best_ = ap;
      snapshot_.clear();
      for (const auto& [name, t] : model.named_parameters()) {
        snapshot_.emplace_back(t.values().begin(), t.values().end());
      }
    }
  }

  // Copies the best snapshot back into `model`; no-op when nothing was seen.
  void restore(DetrModel& model) const {
    if (snapshot_.empty()) return;
    auto params = model.named_parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::copy(snapshot_[i].begin(), snapshot_[i].end(), params[i].second.mutable_values().begin());
    }
  }

  json summary() const {
    json j = ap_json(best_);
    j["best_step"] = best_step_;
    j["history"] = history_;
    return j;
  }

 private:
  double best_map_ = -1.0;
  int best_step_ = 0;
  ApResult best_;
  std::vector<std::vector<double>> snapshot_;
  json history_ = json::array();
};

bool should_eval(int step, int total, int interval) {
  return step == total || step % interval == 0;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Teacher quantities that depend only on (image, frozen weights) are computed
// once per training image.
class TeacherCache {
 public:
  TeacherCache(const DetrModel& teacher, const Dataset& data, const LossWeights& w)
      : teacher_(teacher), data_(data), w_(w) {}

  // [B, HW, D] encoder features for the batch.
  Tensor features(std::span<const int> idx) {
    fill(idx);
    const ModelConfig& c = teacher_.config();
    const std::size_t per = static_cast<std::size_t>(c.tokens()) * c.hidden_dim;
    std::vector<double> v;
    v.reserve(per * idx.size());
    for (int i : idx) {
      const auto& f = entries_.at(i).features;
      v.insert(v.end(), f.begin(), f.end());
    }
    return Tensor::from({static_cast<int>(idx.size()), c.tokens(), c.hidden_dim}, std::move(v));
  }

  // Teacher detection-mode outputs and their matches for the batch.
  std::pair<DetrOutputs, std::vector<Assignment>> detections(std::span<const int> idx) {
    fill(idx);
    const int n = teacher_.config().num_queries;
    const int c = teacher_.config().num_logits();
    std::vector<double> logits, boxes;
    std::vector<Assignment> matches;
    for (int i : idx) {
      const auto& e = entries_.at(i);
      logits.insert(logits.end(), e.logits.begin(), e.logits.end());
      boxes.insert(boxes.end(), e.boxes.begin(), e.boxes.end());
      matches.push_back(e.match);
    }
    const int b = static_cast<int>(idx.size());
    DetrOutputs out;
    out.class_logits = Tensor::from({b, n, c}, std::move(logits));
    out.boxes = Tensor::from({b, n, 4}, std::move(boxes));
    return {std::move(out), std::move(matches)};
  }

 private:
  struct Entry {
    std::vector<double> features, logits, boxes;
    Assignment match;
  };

  void fill(std::span<const int> idx) {
    std::vector<int> missing;
    for (int i : idx) {
      if (!entries_.contains(i)) missing.push_back(i);
    }
    if (missing.empty()) return;
    ag::NoGradGuard guard;
    const Tensor f = teacher_.encode(batch_patches(data_, missing, teacher_.config()));
    const DetrOutputs out = teacher_.decode(f, teacher_.query_embeddings());
    const auto truths = batch_truths(data_, missing);
    const auto matches = match_outputs(out, truths, w_);
    const std::size_t fs = f.numel() / missing.size();
    const std::size_t ls = out.class_logits.numel() / missing.size();
    const std::size_t bs = out.boxes.numel() / missing.size();
    for (std::size_t k = 0; k < missing.size(); ++k) {
      Entry e;
      e.features.assign(f.values().begin() + k * fs, f.values().begin() + (k + 1) * fs);
      e.logits.assign(out.class_logits.values().begin() + k * ls,
                      out.class_logits.values().begin() + (k + 1) * ls);
      e.boxes.assign(out.boxes.values().begin() + k * bs, out.boxes.values().begin() + (k + 1) * bs);
      e.match = matches[k];
      entries_.emplace(missing[k], std::move(e));
    }
  }

  const DetrModel& teacher_;
  const Dataset& data_;
  LossWeights w_;
  std::unordered_map<int, Entry> entries_;
};

std::uint64_t values_hash(const Tensor& t) {
  const auto v = t.values();
  return fnv1a(v.data(), v.size_bytes());
}

}  // namespace

ApResult evaluate(const DetrModel& model, const Dataset& data, int batch) {
  ag::NoGradGuard guard;
  std::vector<std::vector<Detection>> preds;
  preds.reserve(data.samples.size());
  for (int start = 0; start < data.size(); start += batch) {
    std::vector<int> idx;
    for (int i = start; i < std::min(start + batch, data.size()); ++i) idx.push_back(i);
    const DetrOutputs out = model.forward(batch_patches(data, idx, model.config()));
    for (int b = 0; b < out.batch(); ++b) preds.push_back(detections_from(out, b));
  }
  return average_precision(preds, data.truths, model.config().num_classes);
}

json ap_json(const ApResult& ap) {
  return {{"ap50", ap.ap50}, {"ap75", ap.ap75}, {"map", ap.map}};
}

json DistillAudit::to_json() const {
  return {{"steps", steps},
          {"hash_checks", hash_checks},
          {"hash_mismatches", hash_mismatches},
          {"frozen_checks", frozen_checks},
          {"frozen_violations", frozen_violations},
          {"teacher_unchanged", teacher_unchanged},
          {"teacher_hash_before", teacher_hash_before},
          {"teacher_hash_after", teacher_hash_after},
          {"points_hash", points_hash},
          {"clean", clean()}};
}

TrainResult train_teacher(const RunConfig& cfg, const Dataset& train, const Dataset& val,
                          const ProgressFn& progress) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  DetrModel model(cfg.teacher, Rng::for_stream(cfg.seed, 0x7465).next_u64());
  Adam adam(model.parameters(), AdamSettings{cfg.optim.lr});
  BatchSampler sampler(train.size(), Rng::for_stream(cfg.seed, 0x7466).next_u64());
  BestTracker best;
  const int total = cfg.optim.teacher_steps;
  double last_loss = 0.0;
  for (int step = 1; step <= total; ++step) {
    adam.set_lr(lr_at(cfg.optim, step - 1, total));
    const auto idx = sampler.next(cfg.optim.batch);
    const auto truths = batch_truths(train, idx);
    const DetrOutputs out = model.forward(batch_patches(train, idx, cfg.teacher));
    const LossReport loss = detection_loss(out, truths, cfg.loss);
    last_loss = loss.value();
    check_finite(last_loss, step, "teacher detection loss");
    adam.zero_grad();
    ag::backward(loss.total);
    auto params = model.parameters();
    clip_grad_norm(params, cfg.optim.grad_clip);
    adam.step();
    if (should_eval(step, total, cfg.eval_interval)) {
      best.consider(model, evaluate(model, val), step, {{"loss", last_loss}}, progress);
    }
  }
  best.restore(model);
  TrainResult r{std::move(model), json::object(), std::nullopt, {}, 0.0};
  r.metrics = best.summary();
  if (total == 0) {
    const ApResult ap = evaluate(r.model, val);
    r.metrics = ap_json(ap);
    r.metrics["best_step"] = 0;
    r.metrics["history"] = json::array();
  }
  r.wall_seconds = seconds_since(t0);
  return r;
}

std::uint64_t student_init_seed(const RunConfig& cfg) {
  return Rng::for_stream(cfg.seed, 0x7374).next_u64();
}

TrainResult train_student(const RunConfig& cfg, const DetrModel* teacher, const Dataset& train,
                          const Dataset& val, const ProgressFn& progress,
                          const DetrModel* initial) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const Strategy strategy = cfg.distill.strategy;
  const bool distilling = strategy != Strategy::none;
  const bool shared = uses_shared_points(strategy);
  if (distilling && teacher == nullptr) {
    throw SetupError("strategy '" + to_string(strategy) + "' needs a teacher checkpoint");
  }
  ModelConfig scfg = cfg.student;
  scfg.num_queries += cfg.distill.extra_plain_queries;
  if (teacher != nullptr) {
    const ModelConfig& tc = teacher->config();
    if (tc.hidden_dim != scfg.hidden_dim || tc.num_classes != scfg.num_classes ||
        tc.image_size != scfg.image_size || tc.patch_size != scfg.patch_size) {
      throw SetupError("teacher and student are not query-compatible (hidden_dim " +
                       std::to_string(tc.hidden_dim) + " vs " + std::to_string(scfg.hidden_dim) +
                       ")");
    }
  }

  DetrModel model = initial != nullptr ? initial->clone() : DetrModel(scfg, student_init_seed(cfg));
  if (!(model.config() == scfg)) throw SetupError("initial student does not match the config");
  Adam adam(model.parameters(), AdamSettings{cfg.optim.lr});
  BatchSampler sampler(train.size(), Rng::for_stream(cfg.seed, 0x7466).next_u64());
  const std::uint64_t point_seed = Rng::for_stream(cfg.seed, 0x7074).next_u64();

  DistillAudit audit;
  std::optional<TeacherCache> cache;
  DistillationPointSet points;
  if (distilling) {
    audit.teacher_hash_before = parameter_hash(*teacher);
    cache.emplace(*teacher, train, cfg.loss);
    points = build_points(strategy, cfg.distill.general_points, point_seed, teacher,
                          scfg.hidden_dim);
    audit.points_hash = points.hash();
  }
  if (shared && points.empty()) throw SetupError("distillation point set is empty");
  int points_epoch = 0;

  BestTracker best;
  const int total = cfg.optim.student_steps;
  for (int step = 1; step <= total; ++step) {
    adam.set_lr(lr_at(cfg.optim, step - 1, total));
    const auto idx = sampler.next(cfg.optim.batch);
    const auto truths = batch_truths(train, idx);
    const Tensor features = model.encode(batch_patches(train, idx, scfg));
    const DetrOutputs det = model.decode(features, model.query_embeddings());
    std::vector<Assignment> student_matches;
    const LossReport det_loss = detection_loss(det, truths, cfg.loss, &student_matches);
    check_finite(det_loss.value(), step, "student detection loss");
    Tensor total_loss = ag::scale(det_loss.total, cfg.distill.detection_weight);

    if (distilling) {
      ++audit.steps;
      LossReport kd;
      if (shared) {
        if (cfg.distill.resample_general_points && sampler.epoch() != points_epoch &&
            points.general_count() > 0) {
          points_epoch = sampler.epoch();
          points = build_points(strategy, cfg.distill.general_points,
                                point_seed + static_cast<std::uint64_t>(points_epoch), teacher,
                                scfg.hidden_dim);
        }
        const std::uint64_t fed_to_teacher = values_hash(points.points);
        DetrOutputs t_out;
        {
          ag::NoGradGuard guard;
          t_out = teacher->decode(cache->features(idx), points.points);
        }
        const std::uint64_t fed_to_student = values_hash(points.points);
        const DetrOutputs s_out = model.decode(features, points.points);
        ++audit.hash_checks;
        if (fed_to_teacher != fed_to_student || fed_to_student != points.hash()) {
          ++audit.hash_mismatches;
          throw ConsistencyError("distillation points changed between teacher and student "
                                 "forwards at step " + std::to_string(step));
        }
        kd = distill_loss(t_out, s_out, cfg.loss, cfg.distill.use_fgw);
      } else {
        auto [t_det, t_matches] = cache->detections(idx);
        kd = baseline_distill_loss(strategy, t_det, det, t_matches, student_matches, cfg.loss);
      }
      check_finite(kd.value(), step, "distillation loss");
      total_loss = ag::add(total_loss, ag::scale(kd.total, cfg.distill.ratio));
    }

    adam.zero_grad();
    ag::backward(total_loss);
    if (shared) {
      ++audit.frozen_checks;
      if (points.points.requires_grad() || points.points.has_grad()) ++audit.frozen_violations;
    }
    auto params = model.parameters();
    clip_grad_norm(params, cfg.optim.grad_clip);
    adam.step();
    if (should_eval(step, total, cfg.eval_interval)) {
      best.consider(model, evaluate(model, val), step, {{"loss", total_loss.item()}}, progress);
    }
  }

  best.restore(model);
  TrainResult r{std::move(model), json::object(), std::nullopt, audit, 0.0};
  if (total == 0) {
    r.metrics = ap_json(evaluate(r.model, val));
    r.metrics["best_step"] = 0;
    r.metrics["history"] = json::array();
  } else {
    r.metrics = best.summary();
  }
  if (distilling) {
    r.audit.teacher_hash_after = parameter_hash(*teacher);
    r.audit.teacher_unchanged = r.audit.teacher_hash_after == r.audit.teacher_hash_before;
    if (shared) r.points = points;
    r.metrics["audit"] = r.audit.to_json();
  }
  r.wall_seconds = seconds_since(t0);
  return r;
}

}  // namespace kddetr
