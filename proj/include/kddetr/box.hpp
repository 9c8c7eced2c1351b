#pragma once

#include "kddetr/tensor.hpp"

namespace kddetr {

// Normalized (center-x, center-y, width, height), all in [0, 1].
struct BoxCxCyWH {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  friend bool operator==(const BoxCxCyWH&, const BoxCxCyWH&) = default;
};

struct BoxXYXY {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double area() const { return (x2 - x1) * (y2 - y1); }
  friend bool operator==(const BoxXYXY&, const BoxXYXY&) = default;
};

BoxXYXY to_xyxy(const BoxCxCyWH& b);
BoxCxCyWH to_cxcywh(const BoxXYXY& b);

// Intersection over union; 0 when the union is empty.
double iou(const BoxXYXY& a, const BoxXYXY& b);

// Generalized IoU in [-1, 1]. Two coincident degenerate points have an empty
// enclosing box; that case returns 0.
double giou(const BoxXYXY& a, const BoxXYXY& b);

// Sum of absolute coordinate differences in cxcywh space.
double l1_distance(const BoxCxCyWH& a, const BoxCxCyWH& b);

namespace ag {

// [..., 4] cxcywh -> [..., 4] xyxy.
Tensor cxcywh_to_xyxy(const Tensor& boxes);

// Pairwise GIoU of matching rows: a, b [..., 4] xyxy -> [...]. Gradients flow
// to all eight coordinates; at max/min ties the derivative goes to `a`, and a
// clamped (non-overlapping) intersection contributes zero.
Tensor giou(const Tensor& a, const Tensor& b);

}  // namespace ag

}  // namespace kddetr
