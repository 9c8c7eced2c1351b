#pragma once

#include <span>
#include <vector>

#include "kddetr/tensor.hpp"

namespace kddetr {

struct AdamSettings {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moment buffers live here and persist across
// step() calls; the parameter list is fixed at construction.
class Adam {
 public:
  Adam(std::vector<ag::Tensor> params, AdamSettings settings = {});

  // Updates every parameter in place. Throws ContractError if a parameter has
  // no gradient.
  void step();
  void zero_grad();

  void set_lr(double lr) { settings_.lr = lr; }
  const AdamSettings& settings() const { return settings_; }
  long steps_taken() const { return t_; }

 private:
  std::vector<ag::Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamSettings settings_;
  long t_ = 0;
};

// Rescales gradients so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(std::span<ag::Tensor> params, double max_norm);

}  // namespace kddetr
