#include "kddetr/average_precision.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kddetr/errors.hpp"

namespace kddetr {

std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

namespace {

struct Ranked {
  double confidence;
  int image;
  int order;
  const Detection* det;
};

double class_ap(const std::vector<Ranked>& ranked, std::span<const GroundTruth> gts, int cls,
                int total_gt, double threshold) {
  std::vector<std::vector<bool>> taken(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) taken[i].assign(gts[i].size(), false);

  std::vector<double> precision;
  std::vector<double> recall;
  int tp = 0;
  int fp = 0;
  for (const auto& r : ranked) {
    const auto& gt = gts[static_cast<std::size_t>(r.image)];
    const BoxXYXY pb = to_xyxy(r.det->box);
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      if (gt.classes[j] != cls || taken[r.image][j]) continue;
      const double v = iou(pb, to_xyxy(gt.boxes[j]));
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(j);
      }
    }
    if (best_iou < threshold) best = -1;
    if (best >= 0) {
      taken[r.image][best] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / total_gt);
  }
  // All-point interpolation: precision envelope integrated over recall steps.
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i) {
    precision[i] = std::max(precision[i], precision[i + 1]);
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

}  // namespace

ApResult average_precision(std::span<const std::vector<Detection>> predictions,
                           std::span<const GroundTruth> ground_truth, int num_classes,
                           std::span<const double> iou_thresholds) {
  if (ground_truth.empty()) throw UndefinedMetricError("average precision of an empty dataset");
  if (predictions.size() != ground_truth.size()) {
    throw ContractError("average_precision: predictions for " +
                        std::to_string(predictions.size()) + " images, ground truth for " +
                        std::to_string(ground_truth.size()));
  }
  ApResult result;
  result.thresholds.assign(iou_thresholds.begin(), iou_thresholds.end());
  result.ap.assign(iou_thresholds.size(), 0.0);

  for (std::size_t t = 0; t < iou_thresholds.size(); ++t) {
    double sum = 0.0;
    int classes_with_gt = 0;
    for (int cls = 0; cls < num_classes; ++cls) {
      int total_gt = 0;
      for (const auto& gt : ground_truth) {
        total_gt += static_cast<int>(std::count(gt.classes.begin(), gt.classes.end(), cls));
      }
      if (total_gt == 0) continue;
      ++classes_with_gt;
      std::vector<Ranked> ranked;
      for (std::size_t img = 0; img < predictions.size(); ++img) {
        for (std::size_t k = 0; k < predictions[img].size(); ++k) {
          const auto& d = predictions[img][k];
          if (d.cls == cls) {
            ranked.push_back({d.confidence, static_cast<int>(img), static_cast<int>(k), &d});
          }
        }
      }
      std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
        return a.confidence > b.confidence;
      });
      sum += class_ap(ranked, ground_truth, cls, total_gt, iou_thresholds[t]);
    }
    result.ap[t] = classes_with_gt > 0 ? sum / classes_with_gt : 0.0;
  }

  auto at = [&](double thr) {
    for (std::size_t t = 0; t < result.thresholds.size(); ++t) {
      if (std::fabs(result.thresholds[t] - thr) < 1e-9) return result.ap[t];
    }
    return 0.0;
  };
  result.ap50 = at(0.5);
  result.ap75 = at(0.75);
  result.map = result.ap.empty()
                   ? 0.0
                   : std::accumulate(result.ap.begin(), result.ap.end(), 0.0) / result.ap.size();
  return result;
}

ApResult average_precision(std::span<const std::vector<Detection>> predictions,
                           std::span<const GroundTruth> ground_truth, int num_classes) {
  const auto t = coco_iou_thresholds();
  return average_precision(predictions, ground_truth, num_classes, t);
}

std::vector<Detection> detections_from(const DetrOutputs& outputs, int image,
                                       double min_confidence) {
  const int m = outputs.queries();
  const int c = outputs.num_logits();
  const auto logits = outputs.logits_of(image);
  const auto boxes = outputs.boxes_of(image);
  std::vector<Detection> out;
  for (int i = 0; i < m; ++i) {
    const double* row = logits.data() + static_cast<std::size_t>(i) * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (int k = 0; k < c; ++k) z += std::exp(row[k] - mx);
    int best = 0;
    for (int k = 1; k < c - 1; ++k) {
      if (row[k] > row[best]) best = k;
    }
    const double conf = std::exp(row[best] - mx) / z;
    if (conf > min_confidence) out.push_back({best, conf, boxes[i]});
  }
  return out;
}

}  // namespace kddetr
