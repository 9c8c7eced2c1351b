#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "kddetr/errors.hpp"
#include "kddetr/hungarian.hpp"
#include "kddetr/rng.hpp"

using namespace kddetr;

namespace {

// Exhaustive minimum over injective maps columns -> rows.
double brute_force(const CostMatrix& c) {
  std::vector<int> rows(static_cast<std::size_t>(c.rows));
  std::iota(rows.begin(), rows.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  // Enumerate permutations of rows; the first `cols` entries give the map.
  // Duplicates of the same prefix are harmless for the minimum.
  do {
    double total = 0;
    for (int j = 0; j < c.cols; ++j) total += c.at(rows[static_cast<std::size_t>(j)], j);
    best = std::min(best, total);
  } while (std::next_permutation(rows.begin(), rows.end()));
  return best;
}

void check_valid(const Assignment& a, const CostMatrix& c) {
  REQUIRE(static_cast<int>(a.pairs.size()) == c.cols);
  std::vector<bool> used_row(static_cast<std::size_t>(c.rows), false);
  std::vector<bool> used_col(static_cast<std::size_t>(c.cols), false);
  double total = 0;
  for (const auto& [p, g] : a.pairs) {
    CHECK_FALSE(used_row[static_cast<std::size_t>(p)]);
    CHECK_FALSE(used_col[static_cast<std::size_t>(g)]);
    used_row[static_cast<std::size_t>(p)] = true;
    used_col[static_cast<std::size_t>(g)] = true;
    total += c.at(p, g);
  }
  CHECK(total == doctest::Approx(a.total_cost).epsilon(1e-12));
}

}  // namespace

TEST_CASE("hungarian examples") {
  const Assignment one = hungarian(CostMatrix(1, 1, {5}));
  CHECK(one.pairs == std::vector<std::pair<int, int>>{{0, 0}});
  CHECK(one.total_cost == 5);

  const Assignment two = hungarian(CostMatrix(2, 2, {1, 2, 2, 1}));
  CHECK(two.pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}});
  CHECK(two.total_cost == 2);

  const CostMatrix three(3, 3, {4, 1, 3, 2, 0, 5, 3, 2, 2});
  const Assignment a3 = hungarian(three);
  CHECK(a3.total_cost == 5);
  // (pred, gt) pairs sorted by gt: gt0 <- pred1, gt1 <- pred0, gt2 <- pred2
  CHECK(a3.pairs == std::vector<std::pair<int, int>>{{1, 0}, {0, 1}, {2, 2}});
}

TEST_CASE("hungarian errors and empty case") {
  CHECK_THROWS_AS(hungarian(CostMatrix(1, 2, {1, 2})), ContractError);
  CHECK_THROWS_AS(hungarian(CostMatrix(2, 1, {1, std::nan("")})), InputError);
  const Assignment empty = hungarian(CostMatrix(4, 0, {}));
  CHECK(empty.pairs.empty());
  CHECK(empty.total_cost == 0);
}

TEST_CASE("ties go to the lowest prediction index") {
  const Assignment a = hungarian(CostMatrix(3, 1, {2, 2, 2}));
  CHECK(a.pairs == std::vector<std::pair<int, int>>{{0, 0}});
}

TEST_CASE("optimality against brute force on 1000 random matrices") {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(7));
    const int g = static_cast<int>(rng.below(static_cast<std::uint64_t>(n) + 1));
    std::vector<double> v(static_cast<std::size_t>(n) * g);
    // Integer costs half of the time so that ties are common.
    const bool integral = trial % 2 == 0;
    for (auto& x : v) x = integral ? static_cast<double>(rng.below(5)) : rng.uniform(-3, 3);
    const CostMatrix c(n, g, v);
    const Assignment a = hungarian(c);
    check_valid(a, c);
    if (g > 0) CHECK(a.total_cost == brute_force(c));
  }
}

TEST_CASE("adding a constant shifts the optimum by G times the constant") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(5));
    const int g = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    std::vector<double> v(static_cast<std::size_t>(n) * g);
    for (auto& x : v) x = static_cast<double>(rng.below(10));
    const CostMatrix c(n, g, v);
    auto shifted_values = v;
    for (auto& x : shifted_values) x += 3.0;
    const CostMatrix shifted(n, g, shifted_values);
    const Assignment a = hungarian(c);
    const Assignment b = hungarian(shifted);
    CHECK(b.total_cost == a.total_cost + 3.0 * g);
    double recomputed = 0;
    for (const auto& [p, j] : b.pairs) recomputed += c.at(p, j);
    CHECK(recomputed == a.total_cost);
  }
}

TEST_CASE("matching cost entries") {
  // Logit 40 on class 1 makes its probability 1 to double precision.
  const std::vector<double> logits{0, 40, 0, 0, 0, 0, 0, 0};
  const std::vector<BoxCxCyWH> boxes{{0.5, 0.5, 0.2, 0.2}, {0.1, 0.1, 0.1, 0.1}};
  GroundTruth gt;
  gt.classes = {1};
  gt.boxes = {{0.5, 0.5, 0.2, 0.2}};
  const CostMatrix c = matching_cost(logits, 4, boxes, gt, {1, 5, 2});
  CHECK(c.rows == 2);
  CHECK(c.cols == 1);
  CHECK(c.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-12));

  // Second row: p = 1/4, L1 = 0.4 + 0.4 + 0.1 + 0.1, GIoU of disjoint boxes.
  const BoxXYXY a = to_xyxy(boxes[1]), b = to_xyxy(gt.boxes[0]);
  const double expected = -0.25 + 5 * 1.0 + 2 * (1 - giou(a, b));
  CHECK(c.at(1, 0) == doctest::Approx(expected).epsilon(1e-12));

  const CostMatrix empty = matching_cost(logits, 4, boxes, GroundTruth{}, {});
  CHECK(empty.cols == 0);
  CHECK(hungarian(empty).pairs.empty());

  GroundTruth crowded;
  crowded.classes = {0, 1, 2};
  crowded.boxes = {gt.boxes[0], gt.boxes[0], gt.boxes[0]};
  CHECK_THROWS_AS(matching_cost(logits, 4, boxes, crowded, {}), ContractError);
}

TEST_CASE("random 5x3 matching cost solved optimally") {
  Rng rng(5);
  std::vector<double> logits(5 * 4);
  for (auto& v : logits) v = rng.uniform(-2, 2);
  std::vector<BoxCxCyWH> boxes;
  for (int i = 0; i < 5; ++i) {
    boxes.push_back({rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.4),
                     rng.uniform(0.1, 0.4)});
  }
  GroundTruth gt;
  for (int j = 0; j < 3; ++j) {
    gt.classes.push_back(j);
    gt.boxes.push_back({rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.4),
                        rng.uniform(0.1, 0.4)});
  }
  const CostMatrix c = matching_cost(logits, 4, boxes, gt, {});
  CHECK(hungarian(c).total_cost == doctest::Approx(brute_force(c)).epsilon(1e-12));
}
