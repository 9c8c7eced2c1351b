#pragma once

#include <span>
#include <utility>
#include <vector>

#include "kddetr/ground_truth.hpp"

namespace kddetr {

// rows = predictions (N), cols = ground-truth objects (G), row-major.
struct CostMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> costs;

  CostMatrix() = default;
  CostMatrix(int r, int c, std::vector<double> values);

  double at(int r, int c) const { return costs[static_cast<std::size_t>(r) * cols + c]; }
};

struct Assignment {
  // (prediction index, ground-truth index), sorted by ground-truth index.
  std::vector<std::pair<int, int>> pairs;
  double total_cost = 0.0;

  // prediction index assigned to each ground-truth column.
  std::vector<int> prediction_for_gt() const;
  // true for predictions left unmatched, length `num_predictions`.
  std::vector<bool> unmatched_mask(int num_predictions) const;
};

// Minimum-cost injective assignment of every column to a distinct row
// (shortest augmenting path with potentials, O(G^2 N)). Requires rows >=
// cols; throws ContractError otherwise and InputError on non-finite costs.
Assignment hungarian(const CostMatrix& cost);

struct MatchWeights {
  double class_w = 1.0;
  double l1_w = 5.0;
  double giou_w = 2.0;
};

// DETR matching cost for one image:
//   -class_w * p_i(class_j) + l1_w * |b_i - b_j|_1 + giou_w * (1 - GIoU(b_i, b_j))
// with p_i the softmax over the K+1 logits of row i.
CostMatrix matching_cost(std::span<const double> logits, int num_logits,
                         std::span<const BoxCxCyWH> boxes, const GroundTruth& gt,
                         const MatchWeights& weights = {});

}  // namespace kddetr
