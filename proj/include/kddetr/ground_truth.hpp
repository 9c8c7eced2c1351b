#pragma once

#include <vector>

#include "kddetr/box.hpp"

namespace kddetr {

// Annotations of one image: parallel class ids and boxes.
struct GroundTruth {
  std::vector<int> classes;
  std::vector<BoxCxCyWH> boxes;

  std::size_t size() const { return classes.size(); }
  bool empty() const { return classes.empty(); }
};

}  // namespace kddetr
