#include "egdarts/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <unordered_set>

#include "egdarts/error.hpp"
#include "egdarts/util.hpp"

namespace egdarts {

namespace {
thread_local uint64_t g_seq_counter = 0;
}

std::string hex_u64(uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::vector<double>& Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

void Tensor::zero_grad() {
  if (grad.empty()) return;
  std::fill(grad.begin(), grad.end(), 0.0);
}

bool Tensor::grad_is_zero() const {
  for (double g : grad)
    if (g != 0.0) return false;
  return true;
}

TensorPtr make_tensor(std::vector<int64_t> shape, bool requires_grad) {
  return make_tensor(std::move(shape), std::vector<double>(), requires_grad);
}

TensorPtr make_tensor(std::vector<int64_t> shape, std::vector<double> data, bool requires_grad) {
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] <= 0)
      throw ShapeError("tensor dimension " + std::to_string(i) + " must be positive, got " +
                       std::to_string(shape[i]));
  }
  const int64_t n = shape_numel(shape);
  if (data.empty()) {
    data.assign(static_cast<size_t>(n), 0.0);
  } else if (static_cast<int64_t>(data.size()) != n) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape product " + std::to_string(n));
  }
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->data = std::move(data);
  t->requires_grad = requires_grad;
  t->seq = ++g_seq_counter;
  if (requires_grad) t->ensure_grad();
  return t;
}

TensorPtr scalar_tensor(double value, bool requires_grad) {
  return make_tensor({1}, {value}, requires_grad);
}

TensorPtr randn_tensor(std::vector<int64_t> shape, std::mt19937_64& rng, double stddev,
                       bool requires_grad) {
  auto t = make_tensor(std::move(shape), requires_grad);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t->data) v = dist(rng);
  return t;
}

TensorPtr make_node(std::vector<int64_t> shape, std::vector<TensorPtr> parents, const char* op) {
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  auto t = make_tensor(std::move(shape), false);
  t->requires_grad = needs;
  t->parents = std::move(parents);
  t->op = op;
  return t;
}

void backward(const TensorPtr& loss) {
  if (!loss) throw NumericError("backward: null loss tensor");
  if (!loss->is_scalar())
    throw NumericError("backward: loss must be a scalar, got a tensor of " +
                       std::to_string(loss->size()) + " elements");

  // Reachable subgraph, then reverse creation order = reverse topological.
  std::vector<Tensor*> order;
  std::unordered_set<Tensor*> seen;
  std::vector<Tensor*> stack{loss.get()};
  seen.insert(loss.get());
  while (!stack.empty()) {
    Tensor* t = stack.back();
    stack.pop_back();
    order.push_back(t);
    for (const auto& p : t->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Tensor* a, const Tensor* b) { return a->seq > b->seq; });

  for (Tensor* t : order) {
    t->ensure_grad();
    if (t != loss.get()) t->zero_grad();
  }
  loss->grad[0] = 1.0;

  for (Tensor* t : order) {
    if (t->backward_fn) t->backward_fn(*t);
  }
}

void zero_grad(const std::vector<TensorPtr>& tensors) {
  for (const auto& t : tensors) t->zero_grad();
}

namespace debug {
KinkMargins& kink_margins() {
  thread_local KinkMargins m;
  return m;
}
}  // namespace debug

}  // namespace egdarts
