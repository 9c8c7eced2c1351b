#include "kddetr/losses.hpp"

#include <algorithm>
#include <cmath>

#include "kddetr/errors.hpp"
#include "kddetr/ops.hpp"

namespace kddetr {

using ag::Tensor;

void LossWeights::validate() const {
  if (cls < 0 || l1 < 0 || giou < 0 || no_object_weight < 0) {
    throw ParameterError("loss coefficients must be non-negative");
  }
  if (!(temperature > 0.0)) throw ParameterError("distillation temperature must be positive");
}

double weighted_component_sum(const LossReport& report, const LossWeights& w,
                              double distill_ratio) {
  auto get = [&](const char* key) {
    const auto it = report.components.find(key);
    return it == report.components.end() ? 0.0 : it->second;
  };
  return w.cls * get("detection_ce") + w.l1 * get("detection_l1") +
         w.giou * get("detection_giou") +
         distill_ratio * (w.cls * get("distill_kl") + w.l1 * get("distill_l1") +
                          w.giou * get("distill_giou"));
}

std::vector<Assignment> match_outputs(const DetrOutputs& pred, std::span<const GroundTruth> gt,
                                      const LossWeights& w) {
  if (static_cast<int>(gt.size()) != pred.batch()) {
    throw ContractError("ground truth for " + std::to_string(gt.size()) + " images, outputs for " +
                        std::to_string(pred.batch()));
  }
  std::vector<Assignment> out;
  out.reserve(gt.size());
  for (int b = 0; b < pred.batch(); ++b) {
    if (static_cast<int>(gt[b].size()) > pred.queries()) {
      throw ContractError("image has " + std::to_string(gt[b].size()) + " objects but only " +
                          std::to_string(pred.queries()) + " queries");
    }
    const auto boxes = pred.boxes_of(b);
    out.push_back(hungarian(matching_cost(pred.logits_of(b), pred.num_logits(), boxes, gt[b],
                                          w.match())));
  }
  return out;
}

namespace {

Tensor zero_scalar() { return Tensor::scalar(0.0); }

// sum_i weight_i * x_i for x: [P].
Tensor weighted_sum(const Tensor& x, std::vector<double> weights) {
  const int n = static_cast<int>(weights.size());
  return ag::sum(ag::mul(x, Tensor::from({n}, std::move(weights))));
}

Tensor flat_rows(const Tensor& x) {
  const int width = x.dim(-1);
  return ag::reshape(x, {static_cast<int>(x.numel() / width), width});
}

}  // namespace

LossReport detection_loss(const DetrOutputs& pred, std::span<const GroundTruth> gt,
                          const LossWeights& w, std::vector<Assignment>* matches) {
  w.validate();
  auto assignments = match_outputs(pred, gt, w);
  const int batch = pred.batch();
  const int n = pred.queries();
  const int c = pred.num_logits();
  const int no_object = c - 1;

  std::vector<int> targets(static_cast<std::size_t>(batch) * n, no_object);
  std::vector<double> ce_weight(targets.size(), w.no_object_weight / (batch * n));
  std::vector<int> rows;
  std::vector<double> target_boxes;
  int total_objects = 0;
  for (int b = 0; b < batch; ++b) {
    for (const auto& [p, g] : assignments[b].pairs) {
      const std::size_t row = static_cast<std::size_t>(b) * n + p;
      targets[row] = gt[b].classes[g];
      ce_weight[row] = 1.0 / (batch * n);
      rows.push_back(static_cast<int>(row));
      const auto& tb = gt[b].boxes[g];
      target_boxes.insert(target_boxes.end(), {tb.cx, tb.cy, tb.w, tb.h});
    }
    total_objects += static_cast<int>(gt[b].size());
  }

  const Tensor log_probs = ag::log_softmax(flat_rows(pred.class_logits));
  const Tensor ce = ag::neg(weighted_sum(ag::pick(log_probs, targets), ce_weight));

  Tensor l1 = zero_scalar();
  Tensor giou_term = zero_scalar();
  if (!rows.empty()) {
    const int p = static_cast<int>(rows.size());
    const Tensor pb = ag::gather_rows(pred.boxes, rows);
    const Tensor tb = Tensor::from({p, 4}, std::move(target_boxes));
    const std::vector<double> pair_w(rows.size(), 1.0 / total_objects);
    l1 = weighted_sum(ag::sum_last(ag::abs(ag::sub(pb, tb))), pair_w);
    const Tensor g = ag::giou(ag::cxcywh_to_xyxy(pb), ag::cxcywh_to_xyxy(tb));
    giou_term = weighted_sum(ag::sub(Tensor::full({p}, 1.0), g), pair_w);
  }

  LossReport report;
  report.total = ag::add(ag::add(ag::scale(ce, w.cls), ag::scale(l1, w.l1)),
                         ag::scale(giou_term, w.giou));
  report.components = {{"detection_ce", ce.item()},
                       {"detection_l1", l1.item()},
                       {"detection_giou", giou_term.item()}};
  if (matches != nullptr) *matches = std::move(assignments);
  return report;
}

Tensor kl_div(const Tensor& teacher_logits, const Tensor& student_logits, double temperature) {
  if (teacher_logits.shape() != student_logits.shape()) {
    throw ContractError("kl_div: teacher " + ag::shape_str(teacher_logits.shape()) +
                        " vs student " + ag::shape_str(student_logits.shape()));
  }
  // One op so that the student gradient is exactly (q - p) / T: equal logits
  // give an exact zero instead of a rounding residue.
  const int n = student_logits.dim(-1);
  const std::size_t rows = student_logits.numel() / static_cast<std::size_t>(n);
  std::vector<double> log_p, log_q;
  {
    ag::NoGradGuard guard;
    const Tensor lp = ag::log_softmax(teacher_logits, temperature);
    const Tensor lq = ag::log_softmax(student_logits, temperature);
    log_p.assign(lp.values().begin(), lp.values().end());
    log_q.assign(lq.values().begin(), lq.values().end());
  }
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (int j = 0; j < n; ++j) {
      const std::size_t k = r * n + j;
      out[r] += std::exp(log_p[k]) * (log_p[k] - log_q[k]);
    }
  }
  ag::Shape shape(student_logits.shape().begin(), student_logits.shape().end() - 1);
  if (shape.empty()) shape = {1};
  const double inv_t = 1.0 / temperature;
  return ag::make_result(
      std::move(shape), std::move(out), "kl_div", {student_logits},
      [rows, n, inv_t, log_p = std::move(log_p), log_q = std::move(log_q)](ag::detail::Node& self) {
        auto g = self.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (int j = 0; j < n; ++j) {
            const std::size_t k = r * n + j;
            g[k] += self.grad[r] * (std::exp(log_q[k]) - std::exp(log_p[k])) * inv_t;
          }
        }
      });
}

double foreground_weight(std::span<const double> teacher_probs) {
  if (teacher_probs.size() < 2) throw ContractError("foreground_weight: need K >= 1 classes");
  double total = 0.0;
  for (double p : teacher_probs) total += p;
  if (std::fabs(total - 1.0) > 1e-6) {
    throw ContractError("foreground_weight: probabilities sum to " + std::to_string(total));
  }
  return *std::max_element(teacher_probs.begin(), teacher_probs.end() - 1);
}

LossReport distill_pairs(const Tensor& teacher_logits, const Tensor& teacher_boxes,
                         const Tensor& student_logits, const Tensor& student_boxes,
                         const LossWeights& w, bool use_fgw) {
  w.validate();
  if (teacher_logits.shape() != student_logits.shape() ||
      teacher_boxes.shape() != student_boxes.shape() || teacher_logits.rank() != 2 ||
      teacher_boxes.dim(0) != teacher_logits.dim(0)) {
    throw ConsistencyError("distillation pairs differ: teacher " +
                           ag::shape_str(teacher_logits.shape()) + " vs student " +
                           ag::shape_str(student_logits.shape()));
  }
  const int p = teacher_logits.dim(0);
  const int c = teacher_logits.dim(1);

  std::vector<double> weights(static_cast<std::size_t>(p), 1.0);
  if (use_fgw) {
    const Tensor probs = [&] {
      ag::NoGradGuard guard;
      return ag::softmax(teacher_logits, 1.0);
    }();
    for (int i = 0; i < p; ++i) {
      weights[i] = foreground_weight(probs.values().subspan(static_cast<std::size_t>(i) * c, c));
    }
  }
  std::vector<double> scaled(weights);
  for (auto& v : scaled) v /= p;

  const Tensor kl = weighted_sum(kl_div(teacher_logits, student_logits, w.temperature), scaled);
  const Tensor tb = teacher_boxes.detach();
  const Tensor l1 = weighted_sum(ag::sum_last(ag::abs(ag::sub(student_boxes, tb))), scaled);
  const Tensor g = ag::giou(ag::cxcywh_to_xyxy(student_boxes), ag::cxcywh_to_xyxy(tb));
  const Tensor giou_term = weighted_sum(ag::sub(Tensor::full({p}, 1.0), g), scaled);

  LossReport report;
  report.total = ag::add(ag::add(ag::scale(kl, w.cls), ag::scale(l1, w.l1)),
                         ag::scale(giou_term, w.giou));
  report.components = {{"distill_kl", kl.item()},
                       {"distill_l1", l1.item()},
                       {"distill_giou", giou_term.item()}};
  report.per_point_weights = std::move(weights);
  return report;
}

LossReport distill_loss(const DetrOutputs& teacher, const DetrOutputs& student,
                        const LossWeights& w, bool use_fgw) {
  if (teacher.batch() != student.batch() || teacher.queries() != student.queries() ||
      teacher.num_logits() != student.num_logits()) {
    throw ConsistencyError(
        "teacher and student outputs were not produced from the same distillation points "
        "(teacher " + ag::shape_str(teacher.class_logits.shape()) + ", student " +
        ag::shape_str(student.class_logits.shape()) + ")");
  }
  return distill_pairs(flat_rows(teacher.class_logits), flat_rows(teacher.boxes),
                       flat_rows(student.class_logits), flat_rows(student.boxes), w, use_fgw);
}

namespace {

// Sparse selection/averaging rows over the flattened [B*N] outputs.
struct Pairing {
  std::vector<std::vector<std::pair<int, double>>> teacher;
  std::vector<std::vector<std::pair<int, double>>> student;

  void add_single(int t, int s) {
    teacher.push_back({{t, 1.0}});
    student.push_back({{s, 1.0}});
  }
};

Tensor selection_matrix(const std::vector<std::vector<std::pair<int, double>>>& rows, int cols) {
  std::vector<double> m(rows.size() * static_cast<std::size_t>(cols), 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (const auto& [col, coeff] : rows[r]) m[r * cols + col] += coeff;
  }
  return Tensor::from({static_cast<int>(rows.size()), cols}, std::move(m));
}

std::vector<std::pair<int, double>> negatives_average(const Assignment& a, int image, int n) {
  const auto mask = a.unmatched_mask(n);
  const int count = static_cast<int>(std::count(mask.begin(), mask.end(), true));
  std::vector<std::pair<int, double>> row;
  for (int i = 0; i < n; ++i) {
    if (mask[i]) row.emplace_back(image * n + i, 1.0 / count);
  }
  return row;
}

}  // namespace

LossReport baseline_distill_loss(Strategy strategy, const DetrOutputs& teacher_detection,
                                 const DetrOutputs& student_detection,
                                 std::span<const Assignment> teacher_matches,
                                 std::span<const Assignment> student_matches,
                                 const LossWeights& w) {
  const int batch = student_detection.batch();
  if (teacher_detection.batch() != batch ||
      static_cast<int>(teacher_matches.size()) != batch ||
      static_cast<int>(student_matches.size()) != batch) {
    throw ContractError("baseline_distill_loss: batch sizes differ");
  }
  if (teacher_detection.num_logits() != student_detection.num_logits()) {
    throw ConsistencyError("baseline_distill_loss: class widths differ");
  }
  const int nt = teacher_detection.queries();
  const int ns = student_detection.queries();

  Pairing pairing;
  for (int b = 0; b < batch; ++b) {
    switch (strategy) {
      case Strategy::inconsistent:
        for (int i = 0; i < std::min(nt, ns); ++i) pairing.add_single(b * nt + i, b * ns + i);
        break;
      case Strategy::similar_foreground:
      case Strategy::similar_general: {
        const auto t_for = teacher_matches[b].prediction_for_gt();
        const auto s_for = student_matches[b].prediction_for_gt();
        if (t_for.size() != s_for.size()) {
          throw ContractError("teacher and student were matched against different ground truth");
        }
        for (std::size_t g = 0; g < t_for.size(); ++g) {
          pairing.add_single(b * nt + t_for[g], b * ns + s_for[g]);
        }
        if (strategy == Strategy::similar_general && static_cast<int>(t_for.size()) < nt &&
            static_cast<int>(s_for.size()) < ns) {
          pairing.teacher.push_back(negatives_average(teacher_matches[b], b, nt));
          pairing.student.push_back(negatives_average(student_matches[b], b, ns));
        }
        break;
      }
      default:
        throw ContractError("baseline_distill_loss: '" + to_string(strategy) +
                            "' is not a baseline strategy");
    }
  }

  if (pairing.student.empty()) {
    LossReport empty;
    empty.total = zero_scalar();
    empty.components = {{"distill_kl", 0.0}, {"distill_l1", 0.0}, {"distill_giou", 0.0}};
    return empty;
  }
  const Tensor st = selection_matrix(pairing.student, batch * ns);
  const Tensor tt = selection_matrix(pairing.teacher, batch * nt);
  Tensor t_logits, t_boxes;
  {
    ag::NoGradGuard guard;
    t_logits = ag::matmul(tt, flat_rows(teacher_detection.class_logits));
    t_boxes = ag::matmul(tt, flat_rows(teacher_detection.boxes));
  }
  const Tensor s_logits = ag::matmul(st, flat_rows(student_detection.class_logits));
  const Tensor s_boxes = ag::matmul(st, flat_rows(student_detection.boxes));
  return distill_pairs(t_logits, t_boxes, s_logits, s_boxes, w, false);
}

}  // namespace kddetr
