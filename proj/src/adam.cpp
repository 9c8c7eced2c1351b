#include "kddetr/adam.hpp"

#include <cmath>

#include "kddetr/errors.hpp"

namespace kddetr {

Adam::Adam(std::vector<ag::Tensor> params, AdamSettings settings)
    : params_(std::move(params)), settings_(settings) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double b1 = settings_.beta1;
  const double b2 = settings_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (!params_[k].has_grad()) continue;  // untouched this step
    auto values = params_[k].mutable_values();
    const auto grad = params_[k].grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
      v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      values[i] -= settings_.lr * mhat / (std::sqrt(vhat) + settings_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) {
    if (p.has_grad()) {
      auto g = p.mutable_grad();
      std::fill(g.begin(), g.end(), 0.0);
    }
  }
}

double clip_grad_norm(std::span<ag::Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / (norm + 1e-12);
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

}  // namespace kddetr
