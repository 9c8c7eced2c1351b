#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "kddetr/ground_truth.hpp"
#include "kddetr/hungarian.hpp"
#include "kddetr/model.hpp"
#include "kddetr/points.hpp"

namespace kddetr {

struct LossWeights {
  double cls = 1.0;
  double l1 = 5.0;
  double giou = 2.0;
  double temperature = 2.0;
  double no_object_weight = 0.1;

  // Throws ParameterError on negative coefficients or non-positive T.
  void validate() const;
  MatchWeights match() const { return {cls, l1, giou}; }
};

// Scalar loss plus its unweighted parts. Keys used: detection_ce,
// detection_l1, detection_giou, distill_kl, distill_l1, distill_giou.
struct LossReport {
  ag::Tensor total;
  std::map<std::string, double> components;
  std::vector<double> per_point_weights;

  double value() const { return total.item(); }
};

// sum_k coefficient(k) * components[k] for a report built with `w`;
// distillation components are scaled by `distill_ratio`.
double weighted_component_sum(const LossReport& report, const LossWeights& w,
                              double distill_ratio = 1.0);

// Hungarian-matched set loss over a batch. Cross-entropy over all B*N
// queries (unmatched ones toward no-object, down-weighted) averaged over
// B*N; L1 and 1-GIoU over matched pairs averaged over the batch's object
// count. Assignments are treated as constants. `matches`, when given,
// receives the per-image assignment.
LossReport detection_loss(const DetrOutputs& pred, std::span<const GroundTruth> gt,
                          const LossWeights& w, std::vector<Assignment>* matches = nullptr);

// Per-image Hungarian assignments from output values (no graph recorded).
std::vector<Assignment> match_outputs(const DetrOutputs& pred, std::span<const GroundTruth> gt,
                                      const LossWeights& w);

// Row-wise KL(softmax(teacher/T) || softmax(student/T)) for logits [..., C]
// -> [...]. The teacher side is detached.
ag::Tensor kl_div(const ag::Tensor& teacher_logits, const ag::Tensor& student_logits,
                  double temperature);

// Max teacher probability over the K foreground classes of a K+1 row whose
// last entry is no-object. Throws ContractError if the row does not sum to 1
// within 1e-6.
double foreground_weight(std::span<const double> teacher_probs);

// Weighted distillation over paired rows: logits [P, C], boxes [P, 4].
//   (1/P) sum_i w_i [cls*KL_i + l1*|b_s - b_t|_1 + giou*(1 - GIoU)]
// with w_i = 1, or the foreground weight of teacher row i when use_fgw.
LossReport distill_pairs(const ag::Tensor& teacher_logits, const ag::Tensor& teacher_boxes,
                         const ag::Tensor& student_logits, const ag::Tensor& student_boxes,
                         const LossWeights& w, bool use_fgw);

// Distillation between outputs produced from one shared point set. Throws
// ConsistencyError if batch, point count, or class width differ.
LossReport distill_loss(const DetrOutputs& teacher, const DetrOutputs& student,
                        const LossWeights& w, bool use_fgw);

// Logit/box mimicking on each model's own detection outputs:
//   inconsistent        i <-> i for i < min(N_t, N_s)
//   similar_foreground  GT-matched outputs paired in GT order
//   similar_general     similar_foreground plus one pair of averaged
//                       unmatched (negative) predictions per model
// then the unweighted distillation loss over the pairs. A batch without
// pairs yields a constant zero.
LossReport baseline_distill_loss(Strategy strategy, const DetrOutputs& teacher_detection,
                                 const DetrOutputs& student_detection,
                                 std::span<const Assignment> teacher_matches,
                                 std::span<const Assignment> student_matches,
                                 const LossWeights& w);

}  // namespace kddetr
