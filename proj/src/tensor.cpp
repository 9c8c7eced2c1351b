#include "kddetr/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

#include "kddetr/errors.hpp"

namespace kddetr::ag {

namespace {

thread_local bool t_grad_enabled = true;

void check_shape(const Shape& shape) {
  for (int d : shape) {
    if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
  }
}

}  // namespace

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

std::span<double> Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

}  // namespace detail

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(shape);
  if (values.size() != numel_of(shape)) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->id = detail::next_node_id();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_shape(shape);
  const std::size_t n = numel_of(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

int Tensor::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape()));
  }
  return shape()[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::values() const { return node_->value; }
std::span<double> Tensor::mutable_values() { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }
void Tensor::clear_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

Tensor Tensor::clone() const { return from(shape(), node_->value, requires_grad()); }

const char* Tensor::op_name() const { return node_->op; }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor make_result(Shape shape, std::vector<double> values, const char* op,
                   std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> backward_fn) {
  auto node = std::make_shared<detail::Node>();
  node->id = detail::next_node_id();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  if (t_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (auto& t : inputs) node->inputs.push_back(t.node_ptr());
      node->backward = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

std::vector<detail::Node*> reachable_graph(const Tensor& root) {
  std::vector<detail::Node*> order;
  if (!root.defined()) return order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{root.node()};
  seen.insert(root.node());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id < b->id; });
  return order;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<null>")));
  }
  if (!loss.requires_grad()) return;
  auto graph = reachable_graph(loss);
  // Interior grads are per-sweep; leaves keep accumulating.
  for (auto* n : graph) {
    if (n->backward) n->grad.clear();
  }
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = graph.rbegin(); it != graph.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

}  // namespace kddetr::ag
