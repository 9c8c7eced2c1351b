#pragma once

#include <functional>
#include <string>
#include <vector>

#include "kddetr/tensor.hpp"

namespace kddetr {

// Central finite differences of a scalar function with respect to every
// entry of `leaf`. `f` is evaluated without recording a graph.
std::vector<double> numeric_gradient(const std::function<ag::Tensor()>& f, ag::Tensor& leaf,
                                     double h = 1e-5);

// Elementwise |analytic - numeric| / max(|analytic|, |numeric|, floor).
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor = 1e-3);

// Runs backward on f() and compares each leaf's gradient with central
// differences; returns the worst relative error across leaves.
double gradient_error(const std::function<ag::Tensor()>& f, std::vector<ag::Tensor> leaves,
                      double h = 1e-5);

struct GradCheckResult {
  std::string name;
  int seeds = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;

  bool passed() const { return max_rel_error < tolerance; }
};

// Finite-difference suite over every autograd op, the detection and
// distillation losses (tolerance 1e-4) and a miniature full model (1e-3),
// each over `seeds` random instances.
std::vector<GradCheckResult> run_gradcheck_suite(int seeds = 20);

}  // namespace kddetr
