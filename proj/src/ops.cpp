#include "kddetr/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "kddetr/errors.hpp"

namespace kddetr::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

detail::Node& in(detail::Node& self, std::size_t i) { return *self.inputs[i]; }

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Output shape and operand roles for a trailing-axis broadcast.
struct Broadcast {
  Shape out;
  std::size_t a_period;
  std::size_t b_period;
};

Broadcast broadcast_shapes(const Tensor& a, const Tensor& b, const char* op) {
  if (is_suffix(b.shape(), a.shape())) return {a.shape(), a.numel(), b.numel()};
  if (is_suffix(a.shape(), b.shape())) return {b.shape(), a.numel(), b.numel()};
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) +
                       " with " + shape_str(b.shape()));
}

template <class Fwd, class Bwd>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Bwd dfdx) {
  const auto xs = x.values();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = fwd(xs[i]);
  return make_result(x.shape(), std::move(out), op, {x}, [dfdx](detail::Node& self) {
    auto& src = in(self, 0);
    if (!src.requires_grad) return;
    auto g = src.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * dfdx(src.value[i], self.value[i]);
    }
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (b.rank() != 2 || a.rank() < 1 || a.dim(-1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const int k = b.dim(0);
  const int n = b.dim(1);
  const int m = static_cast<int>(a.numel() / static_cast<std::size_t>(k));
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  Map(out.data(), m, n).noalias() = MapC(a.values().data(), m, k) * MapC(b.values().data(), k, n);
  return make_result(std::move(out_shape), std::move(out), "matmul", {a, b},
                     [m, k, n](detail::Node& self) {
                       auto& A = in(self, 0);
                       auto& B = in(self, 1);
                       MapC dC(self.grad.data(), m, n);
                       if (A.requires_grad) {
                         Map(A.grad_buffer().data(), m, k).noalias() +=
                             dC * MapC(B.value.data(), k, n).transpose();
                       }
                       if (B.requires_grad) {
                         Map(B.grad_buffer().data(), k, n).noalias() +=
                             MapC(A.value.data(), m, k).transpose() * dC;
                       }
                     });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != (transpose_b ? b.dim(2) : b.dim(1))) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + (transpose_b ? " (transposed)" : ""));
  }
  const int g = a.dim(0);
  const int m = a.dim(1);
  const int k = a.dim(2);
  const int n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t as = static_cast<std::size_t>(m) * k;
  const std::size_t bs = static_cast<std::size_t>(k) * n;
  const std::size_t cs = static_cast<std::size_t>(m) * n;
  std::vector<double> out(cs * g);
  for (int i = 0; i < g; ++i) {
    MapC A(a.values().data() + i * as, m, k);
    Map C(out.data() + i * cs, m, n);
    if (transpose_b) {
      C.noalias() = A * MapC(b.values().data() + i * bs, n, k).transpose();
    } else {
      C.noalias() = A * MapC(b.values().data() + i * bs, k, n);
    }
  }
  return make_result({g, m, n}, std::move(out), "bmm", {a, b},
                     [=](detail::Node& self) {
                       auto& A = in(self, 0);
                       auto& B = in(self, 1);
                       for (int i = 0; i < g; ++i) {
                         MapC dC(self.grad.data() + i * cs, m, n);
                         if (A.requires_grad) {
                           Map dA(A.grad_buffer().data() + i * as, m, k);
                           if (transpose_b) {
                             dA.noalias() += dC * MapC(B.value.data() + i * bs, n, k);
                           } else {
                             dA.noalias() += dC * MapC(B.value.data() + i * bs, k, n).transpose();
                           }
                         }
                         if (B.requires_grad) {
                           MapC Av(A.value.data() + i * as, m, k);
                           if (transpose_b) {
                             Map(B.grad_buffer().data() + i * bs, n, k).noalias() +=
                                 dC.transpose() * Av;
                           } else {
                             Map(B.grad_buffer().data() + i * bs, k, n).noalias() +=
                                 Av.transpose() * dC;
                           }
                         }
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  const auto bc = broadcast_shapes(a, b, "add");
  const std::size_t n = numel_of(bc.out);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i % bc.a_period] + bv[i % bc.b_period];
  return make_result(bc.out, std::move(out), "add", {a, b}, [bc](detail::Node& self) {
    for (std::size_t s = 0; s < 2; ++s) {
      auto& src = in(self, s);
      if (!src.requires_grad) continue;
      auto g = src.grad_buffer();
      const std::size_t period = s == 0 ? bc.a_period : bc.b_period;
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % period] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const auto bc = broadcast_shapes(a, b, "sub");
  const std::size_t n = numel_of(bc.out);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i % bc.a_period] - bv[i % bc.b_period];
  return make_result(bc.out, std::move(out), "sub", {a, b}, [bc](detail::Node& self) {
    for (std::size_t s = 0; s < 2; ++s) {
      auto& src = in(self, s);
      if (!src.requires_grad) continue;
      auto g = src.grad_buffer();
      const std::size_t period = s == 0 ? bc.a_period : bc.b_period;
      const double sign = s == 0 ? 1.0 : -1.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % period] += sign * self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto bc = broadcast_shapes(a, b, "mul");
  const std::size_t n = numel_of(bc.out);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i % bc.a_period] * bv[i % bc.b_period];
  return make_result(bc.out, std::move(out), "mul", {a, b}, [bc](detail::Node& self) {
    auto& A = in(self, 0);
    auto& B = in(self, 1);
    if (A.requires_grad) {
      auto g = A.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i % bc.a_period] += self.grad[i] * B.value[i % bc.b_period];
      }
    }
    if (B.requires_grad) {
      auto g = B.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i % bc.b_period] += self.grad[i] * A.value[i % bc.a_period];
      }
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.values()) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, "abs", [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return make_result({1}, {total}, "sum", {x}, [](detail::Node& self) {
    auto g = in(self, 0).grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.numel());
  double total = 0.0;
  for (double v : x.values()) total += v;
  return make_result({1}, {total * inv}, "mean", {x}, [inv](detail::Node& self) {
    auto g = in(self, 0).grad_buffer();
    for (auto& v : g) v += self.grad[0] * inv;
  });
}

Tensor sum_last(const Tensor& x) {
  const std::size_t n = static_cast<std::size_t>(x.dim(-1));
  const std::size_t rows = x.numel() / n;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(rows, 0.0);
  const auto xs = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r] += xs[r * n + j];
  }
  return make_result(std::move(out_shape), std::move(out), "sum_last", {x},
                     [n, rows](detail::Node& self) {
                       auto g = in(self, 0).grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.grad[r];
                       }
                     });
}

namespace {

void check_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("softmax temperature must be positive, got " +
                         std::to_string(temperature));
  }
}

}  // namespace

Tensor softmax(const Tensor& x, double temperature) {
  check_temperature(temperature);
  const std::size_t n = static_cast<std::size_t>(x.dim(-1));
  const std::size_t rows = x.numel() / n;
  const double inv_t = 1.0 / temperature;
  const auto xs = x.values();
  std::vector<double> out(xs.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xs.data() + r * n;
    double* y = out.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp((row[j] - mx) * inv_t);
      z += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  return make_result(x.shape(), std::move(out), "softmax", {x},
                     [n, rows, inv_t](detail::Node& self) {
                       auto g = in(self, 0).grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* y = self.value.data() + r * n;
                         const double* dy = self.grad.data() + r * n;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
                         for (std::size_t j = 0; j < n; ++j) {
                           g[r * n + j] += y[j] * (dy[j] - dot) * inv_t;
                         }
                       }
                     });
}

Tensor log_softmax(const Tensor& x, double temperature) {
  check_temperature(temperature);
  const std::size_t n = static_cast<std::size_t>(x.dim(-1));
  const std::size_t rows = x.numel() / n;
  const double inv_t = 1.0 / temperature;
  const auto xs = x.values();
  std::vector<double> out(xs.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xs.data() + r * n;
    double* y = out.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp((row[j] - mx) * inv_t);
    const double lse = std::log(z);
    for (std::size_t j = 0; j < n; ++j) y[j] = (row[j] - mx) * inv_t - lse;
  }
  return make_result(x.shape(), std::move(out), "log_softmax", {x},
                     [n, rows, inv_t](detail::Node& self) {
                       auto g = in(self, 0).grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* y = self.value.data() + r * n;
                         const double* dy = self.grad.data() + r * n;
                         double total = 0.0;
                         for (std::size_t j = 0; j < n; ++j) total += dy[j];
                         for (std::size_t j = 0; j < n; ++j) {
                           g[r * n + j] += (dy[j] - std::exp(y[j]) * total) * inv_t;
                         }
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const int n = x.dim(-1);
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw DimensionError("layer_norm: scale/shift " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match last axis of " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / static_cast<std::size_t>(n);
  const auto xs = x.values();
  const auto gs = gamma.values();
  const auto bs = beta.values();
  std::vector<double> out(xs.size());
  // Normalized values and inverse std are kept for the backward rule.
  auto xhat = std::make_shared<std::vector<double>>(xs.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xs.data() + r * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += row[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= n;
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[r] = is;
    for (int j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = h * gs[j] + bs[j];
    }
  }
  return make_result(x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
                     [n, rows, xhat, inv_std](detail::Node& self) {
                       auto& X = in(self, 0);
                       auto& G = in(self, 1);
                       auto& Bt = in(self, 2);
                       if (G.requires_grad) {
                         auto g = G.grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (int j = 0; j < n; ++j) {
                             g[j] += self.grad[r * n + j] * (*xhat)[r * n + j];
                           }
                         }
                       }
                       if (Bt.requires_grad) {
                         auto g = Bt.grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (int j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
                         }
                       }
                       if (X.requires_grad) {
                         auto g = X.grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                           const double* h = xhat->data() + r * n;
                           const double* dy = self.grad.data() + r * n;
                           double mean_dh = 0.0;
                           double mean_dh_h = 0.0;
                           for (int j = 0; j < n; ++j) {
                             const double dh = dy[j] * G.value[j];
                             mean_dh += dh;
                             mean_dh_h += dh * h[j];
                           }
                           mean_dh /= n;
                           mean_dh_h /= n;
                           for (int j = 0; j < n; ++j) {
                             const double dh = dy[j] * G.value[j];
                             g[r * n + j] += (*inv_std)[r] * (dh - mean_dh - h[j] * mean_dh_h);
                           }
                         }
                       }
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result(std::move(shape), std::move(out), "reshape", {x},
                     [](detail::Node& self) {
                       auto g = in(self, 0).grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                     });
}

Tensor swap_axes12(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("swap_axes12 needs rank 4, got " + shape_str(x.shape()));
  const int a = x.dim(0), b = x.dim(1), c = x.dim(2), d = x.dim(3);
  const auto xs = x.values();
  std::vector<double> out(xs.size());
  auto src_index = [=](int i, int j, int k, int l) {
    return ((static_cast<std::size_t>(i) * b + j) * c + k) * d + l;
  };
  auto dst_index = [=](int i, int j, int k, int l) {
    return ((static_cast<std::size_t>(i) * c + k) * b + j) * d + l;
  };
  for (int i = 0; i < a; ++i)
    for (int j = 0; j < b; ++j)
      for (int k = 0; k < c; ++k)
        for (int l = 0; l < d; ++l) out[dst_index(i, j, k, l)] = xs[src_index(i, j, k, l)];
  return make_result({a, c, b, d}, std::move(out), "swap_axes12", {x},
                     [=](detail::Node& self) {
                       auto g = in(self, 0).grad_buffer();
                       for (int i = 0; i < a; ++i)
                         for (int j = 0; j < b; ++j)
                           for (int k = 0; k < c; ++k)
                             for (int l = 0; l < d; ++l)
                               g[src_index(i, j, k, l)] += self.grad[dst_index(i, j, k, l)];
                     });
}

Tensor expand_leading(const Tensor& x, int count) {
  if (count <= 0) throw DimensionError("expand_leading: count must be positive");
  Shape out_shape{count};
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
  const std::size_t n = x.numel();
  std::vector<double> out(n * count);
  for (int c = 0; c < count; ++c) {
    std::copy(x.values().begin(), x.values().end(), out.begin() + c * n);
  }
  return make_result(std::move(out_shape), std::move(out), "expand_leading", {x},
                     [n, count](detail::Node& self) {
                       auto g = in(self, 0).grad_buffer();
                       for (int c = 0; c < count; ++c) {
                         for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[c * n + i];
                       }
                     });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
  const int width = x.dim(-1);
  const int total_rows = static_cast<int>(x.numel() / static_cast<std::size_t>(width));
  for (int r : rows) {
    if (r < 0 || r >= total_rows) {
      throw DimensionError("gather_rows: row " + std::to_string(r) + " outside " +
                           shape_str(x.shape()));
    }
  }
  if (rows.empty()) throw DimensionError("gather_rows: empty selection");
  const auto xs = x.values();
  std::vector<double> out(rows.size() * width);
  for (std::size_t p = 0; p < rows.size(); ++p) {
    std::copy_n(xs.data() + static_cast<std::size_t>(rows[p]) * width, width,
                out.data() + p * width);
  }
  return make_result({static_cast<int>(rows.size()), width}, std::move(out), "gather_rows", {x},
                     [rows, width](detail::Node& self) {
                       auto g = in(self, 0).grad_buffer();
                       for (std::size_t p = 0; p < rows.size(); ++p) {
                         for (int j = 0; j < width; ++j) {
                           g[static_cast<std::size_t>(rows[p]) * width + j] +=
                               self.grad[p * width + j];
                         }
                       }
                     });
}

Tensor pick(const Tensor& x, const std::vector<int>& index) {
  if (x.rank() != 2 || static_cast<int>(index.size()) != x.dim(0)) {
    throw DimensionError("pick: index count " + std::to_string(index.size()) +
                         " does not match rows of " + shape_str(x.shape()));
  }
  const int width = x.dim(1);
  for (int c : index) {
    if (c < 0 || c >= width) throw DimensionError("pick: column out of range");
  }
  std::vector<double> out(index.size());
  for (std::size_t p = 0; p < index.size(); ++p) out[p] = x.values()[p * width + index[p]];
  return make_result({static_cast<int>(index.size())}, std::move(out), "pick", {x},
                     [index, width](detail::Node& self) {
                       auto g = in(self, 0).grad_buffer();
                       for (std::size_t p = 0; p < index.size(); ++p) {
                         g[p * width + index[p]] += self.grad[p];
                       }
                     });
}

}  // namespace kddetr::ag
