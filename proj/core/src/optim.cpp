#include "egdarts/optim.hpp"

#include <cmath>
#include <string>

#include "egdarts/error.hpp"

namespace egdarts {

SGD::SGD(std::vector<TensorPtr> params, double lr, double momentum, double weight_decay)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
  if (lr_ <= 0.0) throw ConfigError("sgd: base_lr must be > 0");
  if (momentum_ < 0.0 || momentum_ >= 1.0) throw ConfigError("sgd: momentum must be in [0, 1)");
  if (weight_decay_ < 0.0) throw ConfigError("sgd: weight_decay must be >= 0");
  velocity_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i)
    velocity_[i].assign(params_[i]->data.size(), 0.0);
}

void SGD::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    auto& g = p.ensure_grad();
    auto& v = velocity_[i];
    for (size_t j = 0; j < g.size(); ++j) {
      if (!std::isfinite(g[j]))
        throw NumericError("sgd: non-finite gradient in tensor '" +
                           (p.name.empty() ? std::string(p.op) : p.name) + "' at index " +
                           std::to_string(j));
      v[j] = momentum_ * v[j] + g[j];
      p.data[j] -= lr_ * (v[j] + weight_decay_ * p.data[j]);
    }
  }
}

void SGD::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

double cosine_lr(int epoch, int total_epochs, double base_lr) {
  if (total_epochs <= 0) throw ConfigError("cosine_lr: total_epochs must be > 0");
  if (epoch < 0 || epoch > total_epochs)
    throw ConfigError("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " +
                      std::to_string(total_epochs) + "]");
  constexpr double kPi = 3.14159265358979323846;
  return base_lr * 0.5 * (1.0 + std::cos(kPi * static_cast<double>(epoch) /
                                          static_cast<double>(total_epochs)));
}

}  // namespace egdarts
