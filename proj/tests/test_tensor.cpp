#include <cmath>

#include "doctest.h"
#include "kddetr/adam.hpp"
#include "kddetr/errors.hpp"
#include "kddetr/gradcheck.hpp"
#include "kddetr/ops.hpp"
#include "kddetr/rng.hpp"

using namespace kddetr;
using ag::Tensor;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }
std::vector<double> grads(const Tensor& t) { return {t.grad().begin(), t.grad().end()}; }

void check_close(std::span<const double> a, std::vector<double> b, double tol) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(tol));
}

}  // namespace

TEST_CASE("matmul values and shapes") {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from({2, 2}, {3, -1, 2, 5});
  CHECK(vals(ag::matmul(eye, m)) == vals(m));

  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor ones = Tensor::from({2, 1}, {1, 1});
  const Tensor c = ag::matmul(a, ones);
  CHECK(c.shape() == ag::Shape{2, 1});
  CHECK(vals(c) == std::vector<double>{3, 7});

  CHECK_THROWS_AS(ag::matmul(a, Tensor::zeros({3, 1})), DimensionError);
  try {
    ag::matmul(a, Tensor::zeros({3, 1}));
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,2]") != std::string::npos);
    CHECK(msg.find("[3,1]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient of sum(A*B) against finite differences") {
  for (int seed = 0; seed < 5; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed) + 100);
    std::vector<double> av(9), bv(9);
    for (auto& v : av) v = rng.uniform(-1, 1);
    for (auto& v : bv) v = rng.uniform(-1, 1);
    Tensor a = Tensor::from({3, 3}, av, true);
    Tensor b = Tensor::from({3, 3}, bv, true);
    // sum(A B) has dA[i][k] = sum_j B[k][j]; compare with FD and the closed form.
    CHECK(gradient_error([&] { return ag::sum(ag::matmul(a, b)); }, {a, b}) < 1e-6);
    for (int i = 0; i < 3; ++i) {
      for (int k = 0; k < 3; ++k) {
        const double row_sum = bv[k * 3] + bv[k * 3 + 1] + bv[k * 3 + 2];
        CHECK(a.grad()[i * 3 + k] == doctest::Approx(row_sum).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("softmax examples") {
  const Tensor u = ag::softmax(Tensor::from({3}, {0, 0, 0}), 1.0);
  check_close(u.values(), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-12);

  const Tensor s = ag::softmax(Tensor::from({2}, {2, 0}), 2.0);
  const double e = std::exp(1.0);
  check_close(s.values(), {e / (e + 1), 1 / (e + 1)}, 1e-12);
  CHECK(s.at(0) == doctest::Approx(0.7311).epsilon(1e-4));

  Rng rng(5);
  std::vector<double> x(7);
  for (auto& v : x) v = rng.uniform(-20, 20);
  const Tensor hot = ag::softmax(Tensor::from({7}, x), 1e6);
  for (double p : hot.values()) CHECK(std::fabs(p - 1.0 / 7) < 1e-4);

  CHECK_THROWS_AS(ag::softmax(Tensor::from({2}, {1, 2}), 0.0), ParameterError);
  CHECK_THROWS_AS(ag::log_softmax(Tensor::from({2}, {1, 2}), -1.0), ParameterError);
}

TEST_CASE("softmax rows sum to one with entries in (0, 1)") {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x(4 * 6);
    for (auto& v : x) v = rng.uniform(-30, 30);
    const double t = rng.uniform(2.0, 5.0);  // spread <= 30: nothing underflows
    const Tensor s = ag::softmax(Tensor::from({4, 6}, x), t);
    for (int r = 0; r < 4; ++r) {
      double total = 0;
      for (int c = 0; c < 6; ++c) {
        const double p = s.at(r * 6 + c);
        CHECK(p > 0.0);
        CHECK(p < 1.0);
        total += p;
      }
      CHECK(std::fabs(total - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("elementwise examples") {
  CHECK(vals(ag::relu(Tensor::from({3}, {-1, 0, 2}))) == std::vector<double>{0, 0, 2});
  CHECK(ag::sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  const Tensor ln = ag::layer_norm(Tensor::from({3}, {1, 2, 3}), Tensor::full({3}, 1.0),
                                   Tensor::zeros({3}));
  // (x - 2) / sqrt(2/3 + 1e-5)
  const double sd = std::sqrt(2.0 / 3.0 + 1e-5);
  check_close(ln.values(), {-1 / sd, 0, 1 / sd}, 1e-12);
  CHECK(ln.at(0) == doctest::Approx(-1.2247).epsilon(1e-3));

  CHECK(vals(ag::add(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2}, {10, 20}))) ==
        std::vector<double>{11, 22, 13, 24});
  CHECK(vals(ag::mul(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2}, {2, 3}))) ==
        std::vector<double>{2, 6, 6, 12});
  CHECK(ag::sum(Tensor::from({2, 2}, {1, 2, 3, 4})).item() == 10);
  CHECK(ag::mean(Tensor::from({4}, {1, 2, 3, 6})).item() == 3);
  CHECK(ag::log(Tensor::scalar(std::exp(2.0))).item() == doctest::Approx(2.0));
  CHECK(ag::exp(Tensor::scalar(0.0)).item() == 1.0);
}

TEST_CASE("elementwise errors") {
  CHECK_THROWS_AS(ag::add(Tensor::zeros({2, 3}), Tensor::zeros({2})), DimensionError);
  CHECK_THROWS_AS(ag::mul(Tensor::zeros({3, 2}), Tensor::zeros({3})), DimensionError);
  CHECK_THROWS_AS(ag::log(Tensor::from({2}, {1.0, 0.0})), DomainError);
  CHECK_THROWS_AS(ag::log(Tensor::from({1}, {-3.0})), DomainError);
  CHECK_THROWS_AS(ag::layer_norm(Tensor::zeros({2, 3}), Tensor::zeros({2}), Tensor::zeros({3})),
                  DimensionError);
}

TEST_CASE("backward examples") {
  Tensor x = Tensor::from({2, 3}, {1, -2, 3, 0.5, 7, -1}, true);
  ag::backward(ag::sum(x));
  CHECK(grads(x) == std::vector<double>(6, 1.0));

  Tensor y = Tensor::from({2}, {1, 2}, true);
  ag::backward(ag::sum(ag::mul(y, y)));
  CHECK(grads(y) == std::vector<double>{2, 4});

  CHECK_THROWS_AS(ag::backward(ag::mul(y, y)), ContractError);
}

TEST_CASE("fan-out accumulates both paths") {
  // f = sum(x * x + 3 x) uses x three times; df/dx = 2x + 3.
  Tensor x = Tensor::from({3}, {1, -2, 0.5}, true);
  ag::backward(ag::sum(ag::add(ag::mul(x, x), ag::scale(x, 3.0))));
  check_close(x.grad(), {5, -1, 4}, 1e-15);

  // Leaves accumulate across separate backward calls until cleared.
  ag::backward(ag::sum(x));
  check_close(x.grad(), {6, 0, 5}, 1e-15);
  x.clear_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("graph order: inputs precede outputs and backward runs in reverse") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  const Tensor y = ag::sum(ag::exp(ag::scale(x, 2.0)));
  const auto nodes = ag::reachable_graph(y);
  REQUIRE(nodes.size() >= 3);
  for (const auto* n : nodes) {
    for (const auto& in : n->inputs) CHECK(in->id < n->id);
  }
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y;
  {
    ag::NoGradGuard guard;
    y = ag::mul(x, x);
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(ag::grad_enabled());
}

TEST_CASE("determinism of values and gradients") {
  auto run = [] {
    Rng rng(77);
    std::vector<double> v(12);
    for (auto& e : v) e = rng.normal();
    Tensor x = Tensor::from({3, 4}, v, true);
    const Tensor w = Tensor::from({4, 2}, {0.1, -0.3, 0.7, 0.2, -0.5, 0.4, 0.9, -0.8});
    const Tensor out = ag::sum(ag::softmax(ag::matmul(ag::layer_norm(x, Tensor::full({4}, 1.0),
                                                                     Tensor::zeros({4})),
                                                       w),
                                           1.5));
    ag::backward(ag::mul(out, out));
    return std::pair{vals(out), grads(x)};
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("adam examples") {
  Tensor p = Tensor::from({1}, {1.0}, true);
  Adam opt({p}, AdamSettings{0.1});
  p.mutable_grad()[0] = 1.0;
  opt.step();
  CHECK(p.item() == doctest::Approx(0.9).epsilon(1e-6));

  Tensor q = Tensor::from({2}, {0.3, -0.2}, true);
  Adam still({q}, AdamSettings{0.1});
  still.zero_grad();
  still.step();
  CHECK(vals(q) == std::vector<double>{0.3, -0.2});

  Tensor r = Tensor::from({1}, {1.0}, true);
  Adam conv({r}, AdamSettings{0.05});
  for (int i = 0; i < 200; ++i) {
    conv.zero_grad();
    ag::backward(ag::sum(ag::mul(r, r)));
    conv.step();
  }
  CHECK(std::fabs(r.item()) < 0.05);

  Tensor s = Tensor::from({1}, {1.0}, true);
  Adam missing({s});
  missing.step();  // no gradient recorded: left alone
  CHECK(s.item() == 1.0);
}

TEST_CASE("gradient clipping rescales to the requested norm") {
  Tensor a = Tensor::from({2}, {0, 0}, true);
  a.mutable_grad()[0] = 3;
  a.mutable_grad()[1] = 4;
  std::vector<Tensor> ps{a};
  CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
  CHECK(a.grad()[1] == doctest::Approx(0.8));
}

TEST_CASE("finite-difference suite passes") {
  for (const auto& r : run_gradcheck_suite(20)) {
    INFO(r.name << " max relative error " << r.max_rel_error);
    CHECK(r.passed());
  }
}
