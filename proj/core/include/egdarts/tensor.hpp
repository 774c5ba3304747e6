#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace egdarts {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

/// Dense row-major tensor of 64-bit floats with an attached gradient buffer.
///
/// A forward pass builds the autodiff graph implicitly: every non-leaf tensor
/// keeps shared pointers to its inputs plus a closure that scatters its own
/// gradient into them. Creation order (`seq`) is a topological order of the
/// graph by construction, so the reverse pass is a sort, not a search.
struct Tensor : std::enable_shared_from_this<Tensor> {
  std::vector<int64_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // same length as data once touched; empty otherwise
  bool requires_grad = false;

  std::vector<TensorPtr> parents;
  std::function<void(Tensor&)> backward_fn;  // null for leaves
  const char* op = "leaf";
  std::string name;
  uint64_t seq = 0;

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape[i]; }
  bool is_scalar() const { return size() == 1; }

  /// Allocates (zero-filled) the gradient buffer if absent.
  std::vector<double>& ensure_grad();
  void zero_grad();
  /// True when the gradient buffer is absent or all zeros.
  bool grad_is_zero() const;
};

int64_t shape_numel(const std::vector<int64_t>& shape);

/// Leaf constructors. Shape/data length mismatches throw ShapeError.
TensorPtr make_tensor(std::vector<int64_t> shape, bool requires_grad = false);
TensorPtr make_tensor(std::vector<int64_t> shape, std::vector<double> data,
                      bool requires_grad = false);
TensorPtr scalar_tensor(double value, bool requires_grad = false);
TensorPtr randn_tensor(std::vector<int64_t> shape, std::mt19937_64& rng, double stddev,
                       bool requires_grad = false);

/// Internal: allocate a graph node with inputs wired up. requires_grad is
/// inherited from the parents.
TensorPtr make_node(std::vector<int64_t> shape, std::vector<TensorPtr> parents, const char* op);

/// Reverse-mode sweep from a scalar loss. Gradients accumulate by sum over all
/// paths; tensors unreachable from the loss are never touched. Throws
/// NumericError if the loss is not a scalar.
void backward(const TensorPtr& loss);

void zero_grad(const std::vector<TensorPtr>& tensors);

namespace debug {
/// Kink-margin instrumentation for finite-difference tests: when enabled,
/// relu records min |x| and max_pool records the smallest top-2 gap seen, so a
/// test can reject inputs that sit too close to a non-smooth point.
struct KinkMargins {
  bool tracking = false;
  double relu_margin = 1e300;
  double pool_gap = 1e300;
  void reset() {
    relu_margin = 1e300;
    pool_gap = 1e300;
  }
};
KinkMargins& kink_margins();
}  // namespace debug

}  // namespace egdarts
