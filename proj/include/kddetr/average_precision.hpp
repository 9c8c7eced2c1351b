#pragma once

#include <span>
#include <vector>

#include "kddetr/ground_truth.hpp"
#include "kddetr/model.hpp"

namespace kddetr {

struct Detection {
  int cls = 0;
  double confidence = 0.0;
  BoxCxCyWH box;
};

struct ApResult {
  std::vector<double> thresholds;
  std::vector<double> ap;  // one per threshold
  double ap50 = 0.0;
  double ap75 = 0.0;
  double map = 0.0;  // mean over all thresholds
};

// {0.50, 0.55, ..., 0.95}
std::vector<double> coco_iou_thresholds();

// Class-aware detection AP. Per threshold and class, detections are ranked by
// confidence and greedily matched to the best unmatched same-class object
// with IoU >= threshold; the precision-recall curve is integrated with
// all-point interpolation and averaged over classes that have ground truth.
// Throws UndefinedMetricError for an empty dataset.
ApResult average_precision(std::span<const std::vector<Detection>> predictions,
                           std::span<const GroundTruth> ground_truth, int num_classes,
                           std::span<const double> iou_thresholds);

ApResult average_precision(std::span<const std::vector<Detection>> predictions,
                           std::span<const GroundTruth> ground_truth, int num_classes);

// Every query of `image` becomes a detection labelled with its arg-max
// foreground class and confidence = that class's probability. Detections with
// confidence <= min_confidence are dropped.
std::vector<Detection> detections_from(const DetrOutputs& outputs, int image,
                                       double min_confidence = 0.0);

}  // namespace kddetr
