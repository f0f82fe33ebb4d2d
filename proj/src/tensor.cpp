#include "smvit/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace smvit {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

thread_local bool t_grad_enabled = true;

struct Fault {
  std::string op;
  double factor = 1.0;
};
Fault g_fault;

void check_shape(const Shape& shape, std::size_t n) {
  for (auto d : shape) {
    if (d == 0) fail(ErrorKind::Shape, "zero-sized dimension in " + shape_str(shape));
  }
  if (shape_numel(shape) != n) {
    fail(ErrorKind::Shape, "shape " + shape_str(shape) + " does not hold " + std::to_string(n) + " values");
  }
}

}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

namespace testing {
void inject_backward_fault(std::string_view op, double factor) {
  g_fault.op = std::string(op);
  g_fault.factor = factor;
}
void clear_backward_fault() { g_fault = Fault{}; }
}  // namespace testing

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T{0}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  check_shape(shape, values.size());
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) fail(ErrorKind::Rank, "item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(node_->shape, node_->value, false);
}

template <typename T>
void Tensor<T>::backward() const {
  if (!defined() || numel() != 1) {
    fail(ErrorKind::Rank, "backward() requires a scalar, got " + (defined() ? shape_str(shape()) : "undefined"));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order of the live graph.
  std::vector<TensorNode<T>*> order;
  std::unordered_set<const TensorNode<T>*> seen;
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      TensorNode<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>& n = **it;
    if (!n.backward || n.grad.empty()) continue;
    if (!g_fault.op.empty() && n.op == g_fault.op) {
      for (auto& g : n.grad) g = static_cast<T>(g * g_fault.factor);
    }
    n.backward(n);
    n.grad.clear();
    n.grad.shrink_to_fit();
  }
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace smvit
