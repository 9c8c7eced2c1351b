#include "kddetr/box.hpp"

#include <algorithm>
#include <cmath>

#include "kddetr/errors.hpp"

namespace kddetr {

BoxXYXY to_xyxy(const BoxCxCyWH& b) {
  return {b.cx - 0.5 * b.w, b.cy - 0.5 * b.h, b.cx + 0.5 * b.w, b.cy + 0.5 * b.h};
}

BoxCxCyWH to_cxcywh(const BoxXYXY& b) {
  return {0.5 * (b.x1 + b.x2), 0.5 * (b.y1 + b.y2), b.x2 - b.x1, b.y2 - b.y1};
}

namespace {

struct Overlap {
  double inter;
  double uni;
  double enclosing;
};

Overlap overlap(const BoxXYXY& a, const BoxXYXY& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  const double ew = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double eh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  return {inter, uni, ew * eh};
}

}  // namespace

double iou(const BoxXYXY& a, const BoxXYXY& b) {
  const auto o = overlap(a, b);
  return o.uni > 0.0 ? o.inter / o.uni : 0.0;
}

double giou(const BoxXYXY& a, const BoxXYXY& b) {
  const auto o = overlap(a, b);
  if (!(o.enclosing > 0.0)) return 0.0;
  const double iou_v = o.uni > 0.0 ? o.inter / o.uni : 0.0;
  return iou_v - (o.enclosing - o.uni) / o.enclosing;
}

double l1_distance(const BoxCxCyWH& a, const BoxCxCyWH& b) {
  return std::fabs(a.cx - b.cx) + std::fabs(a.cy - b.cy) + std::fabs(a.w - b.w) +
         std::fabs(a.h - b.h);
}

namespace ag {

Tensor cxcywh_to_xyxy(const Tensor& boxes) {
  if (boxes.dim(-1) != 4) {
    throw DimensionError("cxcywh_to_xyxy: last axis must be 4, got " + shape_str(boxes.shape()));
  }
  const auto v = boxes.values();
  std::vector<double> out(v.size());
  for (std::size_t r = 0; r < v.size(); r += 4) {
    out[r + 0] = v[r + 0] - 0.5 * v[r + 2];
    out[r + 1] = v[r + 1] - 0.5 * v[r + 3];
    out[r + 2] = v[r + 0] + 0.5 * v[r + 2];
    out[r + 3] = v[r + 1] + 0.5 * v[r + 3];
  }
  return make_result(boxes.shape(), std::move(out), "cxcywh_to_xyxy", {boxes},
                     [](detail::Node& self) {
                       auto g = self.inputs[0]->grad_buffer();
                       const auto& d = self.grad;
                       for (std::size_t r = 0; r < d.size(); r += 4) {
                         g[r + 0] += d[r + 0] + d[r + 2];
                         g[r + 1] += d[r + 1] + d[r + 3];
                         g[r + 2] += 0.5 * (d[r + 2] - d[r + 0]);
                         g[r + 3] += 0.5 * (d[r + 3] - d[r + 1]);
                       }
                     });
}

Tensor giou(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dim(-1) != 4) {
    throw DimensionError("giou: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " must match with last axis 4");
  }
  const std::size_t pairs = a.numel() / 4;
  std::vector<double> out(pairs);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t p = 0; p < pairs; ++p) {
    const BoxXYXY ba{av[4 * p], av[4 * p + 1], av[4 * p + 2], av[4 * p + 3]};
    const BoxXYXY bb{bv[4 * p], bv[4 * p + 1], bv[4 * p + 2], bv[4 * p + 3]};
    out[p] = kddetr::giou(ba, bb);
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  return make_result(std::move(out_shape), std::move(out), "giou", {a, b},
                     [pairs](detail::Node& self) {
                       auto& A = *self.inputs[0];
                       auto& B = *self.inputs[1];
                       for (std::size_t p = 0; p < pairs; ++p) {
                         const double gout = self.grad[p];
                         if (gout == 0.0) continue;
                         const double* x = A.value.data() + 4 * p;
                         const double* y = B.value.data() + 4 * p;
                         // Identical boxes sit at the maximum; take the zero
                         // subgradient rather than a rounding residue.
                         if (std::equal(x, x + 4, y)) continue;
                         // Intersection extents with tie-to-a selection.
                         const bool a_right = x[2] <= y[2];
                         const bool a_left = x[0] >= y[0];
                         const bool a_bottom = x[3] <= y[3];
                         const bool a_top = x[1] >= y[1];
                         const double iw_raw = (a_right ? x[2] : y[2]) - (a_left ? x[0] : y[0]);
                         const double ih_raw = (a_bottom ? x[3] : y[3]) - (a_top ? x[1] : y[1]);
                         const double iw = std::max(0.0, iw_raw);
                         const double ih = std::max(0.0, ih_raw);
                         const double inter = iw * ih;
                         const double aw = x[2] - x[0], ah = x[3] - x[1];
                         const double bw = y[2] - y[0], bh = y[3] - y[1];
                         const double uni = aw * ah + bw * bh - inter;
                         // Enclosing extents: the larger max / smaller min, ties to a.
                         const bool ea_right = x[2] >= y[2];
                         const bool ea_left = x[0] <= y[0];
                         const bool ea_bottom = x[3] >= y[3];
                         const bool ea_top = x[1] <= y[1];
                         const double ew = (ea_right ? x[2] : y[2]) - (ea_left ? x[0] : y[0]);
                         const double eh = (ea_bottom ? x[3] : y[3]) - (ea_top ? x[1] : y[1]);
                         const double enc = ew * eh;
                         if (!(enc > 0.0)) continue;

                         double g_inter = -1.0 / enc;
                         double g_area = 1.0 / enc;
                         if (uni > 0.0) {
                           g_inter += (uni + inter) / (uni * uni);
                           g_area += -inter / (uni * uni);
                         }
                         const double g_enc = -uni / (enc * enc);
                         g_inter *= gout;
                         g_area *= gout;

                         double ga[4] = {0, 0, 0, 0};
                         double gb[4] = {0, 0, 0, 0};
                         // Box areas.
                         ga[0] -= g_area * ah;
                         ga[2] += g_area * ah;
                         ga[1] -= g_area * aw;
                         ga[3] += g_area * aw;
                         gb[0] -= g_area * bh;
                         gb[2] += g_area * bh;
                         gb[1] -= g_area * bw;
                         gb[3] += g_area * bw;
                         // Intersection (zero when clamped).
                         if (iw_raw > 0.0 && ih_raw > 0.0) {
                           const double d_iw = g_inter * ih;
                           const double d_ih = g_inter * iw;
                           (a_right ? ga : gb)[2] += d_iw;
                           (a_left ? ga : gb)[0] -= d_iw;
                           (a_bottom ? ga : gb)[3] += d_ih;
                           (a_top ? ga : gb)[1] -= d_ih;
                         }
                         // Enclosing box.
                         const double d_ew = g_enc * gout * eh;
                         const double d_eh = g_enc * gout * ew;
                         (ea_right ? ga : gb)[2] += d_ew;
                         (ea_left ? ga : gb)[0] -= d_ew;
                         (ea_bottom ? ga : gb)[3] += d_eh;
                         (ea_top ? ga : gb)[1] -= d_eh;

                         if (A.requires_grad) {
                           auto g = A.grad_buffer();
                           for (int k = 0; k < 4; ++k) g[4 * p + k] += ga[k];
                         }
                         if (B.requires_grad) {
                           auto g = B.grad_buffer();
                           for (int k = 0; k < 4; ++k) g[4 * p + k] += gb[k];
                         }
                       }
                     });
}

}  // namespace ag

}  // namespace kddetr
