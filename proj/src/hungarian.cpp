#include "kddetr/hungarian.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kddetr/errors.hpp"

namespace kddetr {

CostMatrix::CostMatrix(int r, int c, std::vector<double> values)
    : rows(r), cols(c), costs(std::move(values)) {
  if (r < 0 || c < 0 || costs.size() != static_cast<std::size_t>(r) * c) {
    throw DimensionError("cost matrix size does not match " + std::to_string(r) + "x" +
                         std::to_string(c));
  }
}

std::vector<int> Assignment::prediction_for_gt() const {
  std::vector<int> out(pairs.size(), -1);
  for (const auto& [pred, gt] : pairs) out[static_cast<std::size_t>(gt)] = pred;
  return out;
}

std::vector<bool> Assignment::unmatched_mask(int num_predictions) const {
  std::vector<bool> mask(static_cast<std::size_t>(num_predictions), true);
  for (const auto& [pred, gt] : pairs) mask[static_cast<std::size_t>(pred)] = false;
  return mask;
}

Assignment hungarian(const CostMatrix& cost) {
  const int n_pred = cost.rows;
  const int n_gt = cost.cols;
  if (n_pred < n_gt) {
    throw ContractError("hungarian: fewer predictions (" + std::to_string(n_pred) +
                        ") than ground-truth objects (" + std::to_string(n_gt) + ")");
  }
  for (double c : cost.costs) {
    if (!std::isfinite(c)) throw InputError("hungarian: non-finite cost entry");
  }
  Assignment result;
  if (n_gt == 0) return result;

  // Ground-truth objects are the rows being assigned, predictions the
  // columns; 1-based with a virtual column 0.
  constexpr double kInf = std::numeric_limits<double>::infinity();
  const int n = n_gt;
  const int m = n_pred;
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> owner(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    owner[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const int i0 = owner[j0];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost.at(j - 1, i0 - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        // Strict comparison keeps the lowest prediction index on ties.
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const int j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<int> pred_of(n, -1);
  for (int j = 1; j <= m; ++j) {
    if (owner[j] != 0) pred_of[owner[j] - 1] = j - 1;
  }
  for (int g = 0; g < n; ++g) {
    result.pairs.emplace_back(pred_of[g], g);
    result.total_cost += cost.at(pred_of[g], g);
  }
  return result;
}

CostMatrix matching_cost(std::span<const double> logits, int num_logits,
                         std::span<const BoxCxCyWH> boxes, const GroundTruth& gt,
                         const MatchWeights& weights) {
  const int n = static_cast<int>(boxes.size());
  const int g = static_cast<int>(gt.size());
  if (logits.size() != static_cast<std::size_t>(n) * num_logits) {
    throw DimensionError("matching_cost: logits do not cover every prediction");
  }
  if (g > n) {
    throw ContractError("matching_cost: " + std::to_string(g) + " objects but only " +
                        std::to_string(n) + " predictions");
  }
  std::vector<double> probs(logits.size());
  for (int i = 0; i < n; ++i) {
    const double* row = logits.data() + static_cast<std::size_t>(i) * num_logits;
    double* p = probs.data() + static_cast<std::size_t>(i) * num_logits;
    const double mx = *std::max_element(row, row + num_logits);
    double z = 0.0;
    for (int c = 0; c < num_logits; ++c) z += (p[c] = std::exp(row[c] - mx));
    for (int c = 0; c < num_logits; ++c) p[c] /= z;
  }
  std::vector<double> out(static_cast<std::size_t>(n) * g);
  for (int i = 0; i < n; ++i) {
    const BoxXYXY pb = to_xyxy(boxes[i]);
    for (int j = 0; j < g; ++j) {
      const double p = probs[static_cast<std::size_t>(i) * num_logits + gt.classes[j]];
      out[static_cast<std::size_t>(i) * g + j] =
          -weights.class_w * p + weights.l1_w * l1_distance(boxes[i], gt.boxes[j]) +
          weights.giou_w * (1.0 - giou(pb, to_xyxy(gt.boxes[j])));
    }
  }
  return CostMatrix(n, g, std::move(out));
}

}  // namespace kddetr
