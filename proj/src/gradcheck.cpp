#include "kddetr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "kddetr/box.hpp"
#include "kddetr/errors.hpp"
#include "kddetr/losses.hpp"
#include "kddetr/model.hpp"
#include "kddetr/ops.hpp"
#include "kddetr/rng.hpp"

namespace kddetr {

using ag::Tensor;

std::vector<double> numeric_gradient(const std::function<Tensor()>& f, Tensor& leaf, double h) {
  ag::NoGradGuard guard;
  auto values = leaf.mutable_values();
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double up = f().item();
    values[i] = saved - h;
    const double down = f().item();
    values[i] = saved;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor) {
  if (analytic.size() != numeric.size()) {
    throw ContractError("max_relative_error: length mismatch");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double scale = std::max({std::fabs(analytic[i]), std::fabs(numeric[i]), floor});
    worst = std::max(worst, std::fabs(analytic[i] - numeric[i]) / scale);
  }
  return worst;
}

double gradient_error(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double h) {
  for (auto& leaf : leaves) leaf.clear_grad();
  ag::backward(f());
  double worst = 0.0;
  for (auto& leaf : leaves) {
    std::vector<double> analytic(leaf.numel(), 0.0);
    if (leaf.has_grad()) analytic.assign(leaf.grad().begin(), leaf.grad().end());
    const auto numeric = numeric_gradient(f, leaf, h);
    worst = std::max(worst, max_relative_error(analytic, numeric));
  }
  return worst;
}

namespace {

Tensor random_tensor(Rng& rng, ag::Shape shape, double lo = -1.0, double hi = 1.0,
                     double avoid = 0.0) {
  std::vector<double> v(ag::numel_of(shape));
  for (auto& x : v) {
    do {
      x = rng.uniform(lo, hi);
    } while (std::fabs(x) < avoid);
  }
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Fixed random projection so a check sees every output entry with a
// different weight.
Tensor project(const Tensor& y, Rng& rng) {
  std::vector<double> w(y.numel());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return ag::sum(ag::mul(y, Tensor::from(y.shape(), std::move(w))));
}

// Random xyxy boxes whose edges stay well separated so that no max/min
// selection or intersection clamp switches within the FD step.
std::pair<Tensor, Tensor> separated_box_pairs(Rng& rng, int count) {
  std::vector<double> a, b;
  while (static_cast<int>(a.size()) < 4 * count) {
    double x[4], y[4];
    for (double* box : {x, y}) {
      const double cx = rng.uniform(0.2, 0.8), cy = rng.uniform(0.2, 0.8);
      const double w = rng.uniform(0.05, 0.5), h = rng.uniform(0.05, 0.5);
      box[0] = cx - w / 2;
      box[1] = cy - h / 2;
      box[2] = cx + w / 2;
      box[3] = cy + h / 2;
    }
    const double iw = std::min(x[2], y[2]) - std::max(x[0], y[0]);
    const double ih = std::min(x[3], y[3]) - std::max(x[1], y[1]);
    bool ok = std::fabs(iw) > 1e-3 && std::fabs(ih) > 1e-3;
    for (int k = 0; k < 4; ++k) ok = ok && std::fabs(x[k] - y[k]) > 1e-3;
    if (!ok) continue;
    a.insert(a.end(), x, x + 4);
    b.insert(b.end(), y, y + 4);
  }
  return {Tensor::from({count, 4}, std::move(a), true), Tensor::from({count, 4}, std::move(b), true)};
}

using Case = std::function<double(Rng&)>;

struct NamedCase {
  const char* name;
  double tolerance;
  Case run;
};

DetrOutputs random_outputs(Rng& rng, int batch, int queries, int logits) {
  DetrOutputs out;
  out.class_logits = random_tensor(rng, {batch, queries, logits}, -2.0, 2.0);
  out.boxes = random_tensor(rng, {batch, queries, 4}, 0.1, 0.6);
  return out;
}

std::vector<NamedCase> cases() {
  constexpr double kOp = 1e-4;
  std::vector<NamedCase> c;
  c.push_back({"matmul", kOp, [](Rng& r) {
                 Tensor a = random_tensor(r, {3, 3}), b = random_tensor(r, {3, 3});
                 Rng pr = r;
                 return gradient_error([&] { Rng p = pr; return project(ag::matmul(a, b), p); }, {a, b});
               }});
  c.push_back({"bmm", kOp, [](Rng& r) {
                 Tensor a = random_tensor(r, {2, 3, 4}), b = random_tensor(r, {2, 4, 2});
                 Rng pr = r;
                 return gradient_error([&] { Rng p = pr; return project(ag::bmm(a, b), p); }, {a, b});
               }});
  c.push_back({"bmm_transposed", kOp, [](Rng& r) {
                 Tensor a = random_tensor(r, {2, 3, 4}), b = random_tensor(r, {2, 5, 4});
                 Rng pr = r;
                 return gradient_error([&] { Rng p = pr; return project(ag::bmm(a, b, true), p); },
                                       {a, b});
               }});
  c.push_back({"add_broadcast", kOp, [](Rng& r) {
                 Tensor a = random_tensor(r, {2, 3, 4}), b = random_tensor(r, {3, 4});
                 Rng pr = r;
                 return gradient_error([&] { Rng p = pr; return project(ag::add(a, b), p); }, {a, b});
               }});
  c.push_back({"sub_broadcast", kOp, [](Rng& r) {
                 Tensor a = random_tensor(r, {4}), b = random_tensor(r, {3, 4});
                 Rng pr = r;
                 return gradient_error([&] { Rng p = pr; return project(ag::sub(a, b), p); }, {a, b});
               }});
  c.push_back({"mul_broadcast", kOp, [](Rng& r) {
                 Tensor a = random_tensor(r, {3, 4}), b = random_tensor(r, {4});
                 Rng pr = r;
                 return gradient_error([&] { Rng p = pr; return project(ag::mul(a, b), p); }, {a, b});
               }});
  c.push_back({"scale", kOp, [](Rng& r) {
                 Tensor a = random_tensor(r, {5});
                 Rng pr = r;
                 return gradient_error([&] { Rng p = pr; return project(ag::scale(a, -2.5), p); }, {a});
               }});
  c.push_back({"relu", kOp, [](Rng& r) {
                 Tensor a = random_tensor(r, {4, 5}, -1.0, 1.0, 1e-3);
                 Rng pr = r;
                 return gradient_error([&] { Rng p = pr; return project(ag::relu(a), p); }, {a});
               }});
  c.push_back({"sigmoid", kOp, [](Rng& r) {
                 Tensor a = random_tensor(r, {4, 5}, -4.0, 4.0);
                 Rng pr = r;
                 return gradient_error([&] { Rng p = pr; return project(ag::sigmoid(a), p); }, {a});
               }});
  c.push_back({"exp", kOp, [](Rng& r) {
                 Tensor a = random_tensor(r, {6});
                 Rng pr = r;
                 return gradient_error([&] { Rng p = pr; return project(ag::exp(a), p); }, {a});
               }});
  c.push_back({"log", kOp, [](Rng& r) {
                 Tensor a = random_tensor(r, {6}, 0.2, 3.0);
                 Rng pr = r;
                 return gradient_error([&] { Rng p = pr; return project(ag::log(a), p); }, {a});
               }});
  c.push_back({"abs", kOp, [](Rng& r) {
                 Tensor a = random_tensor(r, {6}, -1.0, 1.0, 1e-3);
                 Rng pr = r;
                 return gradient_error([&] { Rng p = pr; return project(ag::abs(a), p); }, {a});
               }});
  c.push_back({"sum", kOp, [](Rng& r) {
                 Tensor a = random_tensor(r, {3, 4});
                 return gradient_error([&] { return ag::sum(ag::mul(a, a)); }, {a});
               }});
  c.push_back({"mean", kOp, [](Rng& r) {
                 Tensor a = random_tensor(r, {3, 4});
                 return gradient_error([&] { return ag::mean(ag::mul(a, a)); }, {a});
               }});
  c.push_back({"sum_last", kOp, [](Rng& r) {
                 Tensor a = random_tensor(r, {3, 4});
                 Rng pr = r;
                 return gradient_error([&] { Rng p = pr; return project(ag::sum_last(a), p); }, {a});
               }});
  c.push_back({"softmax", kOp, [](Rng& r) {
                 Tensor a = random_tensor(r, {3, 5}, -2.0, 2.0);
                 Rng pr = r;
                 return gradient_error([&] { Rng p = pr; return project(ag::softmax(a, 1.7), p); },
                                       {a});
               }});
  c.push_back({"log_softmax", kOp, [](Rng& r) {
                 Tensor a = random_tensor(r, {3, 5}, -2.0, 2.0);
                 Rng pr = r;
                 return gradient_error(
                     [&] { Rng p = pr; return project(ag::log_softmax(a, 0.8), p); }, {a});
               }});
  c.push_back({"layer_norm", kOp, [](Rng& r) {
                 Tensor x = random_tensor(r, {3, 6}, -2.0, 2.0);
                 Tensor g = random_tensor(r, {6}, 0.5, 1.5), b = random_tensor(r, {6});
                 Rng pr = r;
                 return gradient_error(
                     [&] { Rng p = pr; return project(ag::layer_norm(x, g, b), p); }, {x, g, b});
               }});
  c.push_back({"reshape_swap", kOp, [](Rng& r) {
                 Tensor x = random_tensor(r, {2, 3, 4});
                 Rng pr = r;
                 return gradient_error(
                     [&] {
                       Rng p = pr;
                       return project(ag::swap_axes12(ag::reshape(x, {2, 3, 2, 2})), p);
                     },
                     {x});
               }});
  c.push_back({"expand_leading", kOp, [](Rng& r) {
                 Tensor x = random_tensor(r, {3, 2});
                 Rng pr = r;
                 return gradient_error(
                     [&] { Rng p = pr; return project(ag::expand_leading(x, 4), p); }, {x});
               }});
  c.push_back({"gather_rows", kOp, [](Rng& r) {
                 Tensor x = random_tensor(r, {2, 3, 4});
                 Rng pr = r;
                 return gradient_error(
                     [&] { Rng p = pr; return project(ag::gather_rows(x, {5, 0, 5, 2}), p); }, {x});
               }});
  c.push_back({"pick", kOp, [](Rng& r) {
                 Tensor x = random_tensor(r, {3, 4});
                 Rng pr = r;
                 return gradient_error(
                     [&] { Rng p = pr; return project(ag::pick(x, {3, 0, 3}), p); }, {x});
               }});
  c.push_back({"cxcywh_to_xyxy", kOp, [](Rng& r) {
                 Tensor x = random_tensor(r, {3, 4}, 0.1, 0.9);
                 Rng pr = r;
                 return gradient_error(
                     [&] { Rng p = pr; return project(ag::cxcywh_to_xyxy(x), p); }, {x});
               }});
  c.push_back({"giou", kOp, [](Rng& r) {
                 auto [a, b] = separated_box_pairs(r, 6);
                 Rng pr = r;
                 return gradient_error([&] { Rng p = pr; return project(ag::giou(a, b), p); },
                                       {a, b});
               }});
  c.push_back({"detection_loss", kOp, [](Rng& r) {
                 DetrOutputs out = random_outputs(r, 2, 5, 4);
                 std::vector<GroundTruth> gt(2);
                 for (int b = 0; b < 2; ++b) {
                   const int g = 1 + static_cast<int>(r.below(3));
                   for (int j = 0; j < g; ++j) {
                     gt[b].classes.push_back(static_cast<int>(r.below(3)));
                     gt[b].boxes.push_back({r.uniform(0.2, 0.8), r.uniform(0.2, 0.8),
                                            r.uniform(0.1, 0.5), r.uniform(0.1, 0.5)});
                   }
                 }
                 // Freeze the matching computed at the unperturbed point.
                 std::vector<Assignment> frozen;
                 {
                   ag::NoGradGuard guard;
                   frozen = match_outputs(out, gt, LossWeights{});
                 }
                 auto loss = [&] {
                   auto now = match_outputs(out, gt, LossWeights{});
                   for (std::size_t b = 0; b < now.size(); ++b) {
                     if (now[b].pairs != frozen[b].pairs) {
                       throw ContractError("matching changed under perturbation");
                     }
                   }
                   return detection_loss(out, gt, LossWeights{}).total;
                 };
                 return gradient_error(loss, {out.class_logits, out.boxes});
               }});
  c.push_back({"distill_loss", kOp, [](Rng& r) {
                 DetrOutputs teacher = random_outputs(r, 1, 4, 4);
                 DetrOutputs student = random_outputs(r, 1, 4, 4);
                 LossWeights w;
                 w.temperature = 2.0;
                 return gradient_error(
                     [&] { return distill_loss(teacher, student, w, true).total; },
                     {student.class_logits});
               }});
  c.push_back({"full_model", 1e-3, [](Rng& r) {
                 ModelConfig cfg;
                 cfg.image_size = 8;
                 cfg.patch_size = 4;
                 cfg.hidden_dim = 8;
                 cfg.num_heads = 2;
                 cfg.encoder_layers = 1;
                 cfg.decoder_layers = 1;
                 cfg.ffn_dim = 16;
                 cfg.num_queries = 3;
                 DetrModel model(cfg, r.next_u64());
                 std::vector<float> img0(8 * 8 * 3), img1(8 * 8 * 3);
                 for (auto& v : img0) v = static_cast<float>(r.uniform());
                 for (auto& v : img1) v = static_cast<float>(r.uniform());
                 const std::vector<std::span<const float>> imgs{img0, img1};
                 const Tensor input = patchify(imgs, cfg);
                 return gradient_error(
                     [&] {
                       const DetrOutputs o = model.forward(input);
                       return ag::add(ag::sum(o.class_logits), ag::sum(o.boxes));
                     },
                     model.parameters());
               }});
  return c;
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite(int seeds) {
  std::vector<GradCheckResult> results;
  for (const auto& c : cases()) {
    GradCheckResult res{c.name, seeds, 0.0, c.tolerance};
    for (int s = 0; s < seeds; ++s) {
      Rng rng = Rng::for_stream(0x6d617463ULL, static_cast<std::uint64_t>(s));
      res.max_rel_error = std::max(res.max_rel_error, c.run(rng));
    }
    results.push_back(res);
  }
  return results;
}

}  // namespace kddetr
