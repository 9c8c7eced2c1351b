#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace kddetr::ag {

using Shape = std::vector<int>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One vertex of the dynamic tape. Ids are handed out from a process-wide
// counter, so sorting reachable nodes by descending id replays construction
// order in reverse.
struct Node {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  // Grad storage of this node, zero-filled on first use.
  std::span<double> grad_buffer();
};

std::uint64_t next_node_id();

}  // namespace detail

// Dense row-major array of 64-bit reals with an optional gradient slot.
// Copies share the underlying node (handle semantics); use clone() for a deep
// copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  // Negative axes count from the end.
  int dim(int axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  // Writable view. Mutating a tensor that already feeds a recorded graph
  // invalidates that graph; intended for leaves (parameters, inputs).
  std::span<double> mutable_values();

  double item() const;
  double at(std::size_t flat_index) const { return values()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void clear_grad();

  // Same values, cut from the graph.
  Tensor detach() const;
  Tensor clone() const;

  const char* op_name() const;
  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Reverse-mode sweep from a scalar loss. Visits every node reachable from
// `loss` in exact reverse construction order; gradients accumulate into
// leaves across calls (call clear_grad / zero_grad between steps).
void backward(const Tensor& loss);

// Nodes reachable from `root` in construction order (the recorded graph).
std::vector<detail::Node*> reachable_graph(const Tensor& root);

bool grad_enabled();

// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds a result node. Records `inputs` and `backward_fn` only when grad mode
// is on and some input requires grad.
Tensor make_result(Shape shape, std::vector<double> values, const char* op,
                   std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> backward_fn);

}  // namespace kddetr::ag
