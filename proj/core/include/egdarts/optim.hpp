#pragma once

#include <cstdint>
#include <vector>

#include "egdarts/tensor.hpp"

namespace egdarts {

/// SGD with classical momentum; weight decay is applied at use, not folded
/// into the buffer:
///   v <- mu*v + g;  p <- p - lr*(v + wd*p)
/// Velocity buffers persist across steps. Non-finite gradients are an error
/// naming the offending tensor.
class SGD {
 public:
  SGD(std::vector<TensorPtr> params, double lr, double momentum = 0.9,
      double weight_decay = 5e-4);

  void step();
  void zero_grad();

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  const std::vector<TensorPtr>& params() const { return params_; }

 private:
  std::vector<TensorPtr> params_;
  std::vector<std::vector<double>> velocity_;
  double lr_;
  double momentum_;
  double weight_decay_;
};

/// Cosine annealing from base_lr at epoch 0 to 0 at epoch == total_epochs.
/// Out-of-range epochs are a configuration error.
double cosine_lr(int epoch, int total_epochs, double base_lr);

}  // namespace egdarts
