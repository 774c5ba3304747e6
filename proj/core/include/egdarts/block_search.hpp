#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "egdarts/data_io.hpp"
#include "egdarts/search_space.hpp"
#include "egdarts/supernet.hpp"
#include "egdarts/tensor.hpp"

namespace egdarts {

// ---- Complexity/loss regression driving the gradient enhancement ----------

struct ComplexityFit {
  double theta0 = 0.0;
  double theta1 = 0.0;
};

/// Least-squares line through (x=complexity, y=loss) pairs:
///   theta1 = (m*Σxy − Σx*Σy) / (m*Σx² − (Σx)²)
/// Degenerate (fewer than 2 pairs, or all x identical): nullopt, and the
/// enhancement stays off for the step.
std::optional<ComplexityFit> fit_theta1(const std::vector<std::pair<double, double>>& history);

/// Difference quotient over the two most recent pairs:
///   (x_k − x_{k−1}) / (y_k − y_{k−1});
/// nullopt when |Δy| < 1e-12 or fewer than 2 pairs.
std::optional<double> grad_theta(const std::vector<std::pair<double, double>>& history);

/// Indicator: 1 if (grad_theta > theta1 or grad_theta > 0), else 0.
int sigma(double grad_theta, double theta1);

/// Amplification factor: clamp(sigma * |grad_theta| / theta1, 0, phi_cap);
/// 0 when theta1 == 0.
double phi(double grad_theta, double theta1, double phi_cap);

// ---- Bilevel architecture gradient -----------------------------------------

enum class ArchGradMode { first_order, second_order };

/// Anything with weights, architecture scores, and the two losses of a
/// bilevel search. Loss calls must build fresh graphs over the current
/// parameter values.
class BilevelProblem {
 public:
  virtual ~BilevelProblem() = default;
  virtual const std::vector<TensorPtr>& weight_params() = 0;
  virtual const std::vector<TensorPtr>& alpha_params() = 0;
  virtual TensorPtr train_loss() = 0;
  virtual TensorPtr val_loss() = 0;
};

struct ArchGradient {
  std::vector<std::vector<double>> grads;  // aligned with alpha_params()
  double val_loss = 0.0;                   // loss the gradient was taken at
};

/// First order: d/dα val_loss at the current weights. Second order: the
/// unrolled-one-step gradient
///   ∇α L_val(ω′, α) − ξ (∇α L_train(ω⁺, α) − ∇α L_train(ω⁻, α)) / (2ε)
/// with ω′ = ω − ξ ∇ω L_train, ε = 0.01/‖∇_{ω′} L_val‖₂, ω± = ω ± ε ∇_{ω′} L_val.
/// Weights are restored on exit. epsilon_override > 0 pins ε (for numerical
/// studies of the finite-difference term).
ArchGradient arch_gradient(BilevelProblem& problem, ArchGradMode mode, double xi,
                           double epsilon_override = 0.0);

// ---- Progressive search -----------------------------------------------------

struct StagePlan {
  int depth = 0;      // proxy supernet depth (cells)
  int ops_after = 0;  // active ops per edge after this stage's pruning
};

struct BlockSearchConfig {
  std::vector<StagePlan> stages{{5, 8}, {11, 4}, {17, 1}};
  int epochs_per_stage = 40;
  int batch_size = 96;
  double weight_lr = 0.025;  // cosine-annealed over each stage
  double weight_momentum = 0.9;
  double weight_decay = 5e-4;
  double arch_lr = 0.025;  // plain SGD on alpha
  double inner_lr = 0.025;  // xi of the unrolled step
  ArchGradMode mode = ArchGradMode::second_order;
  int history_window = 10;  // m
  double phi_cap = 10.0;
  int warmup_steps = 20;  // per stage; phi forced to 0 while warming up
  bool enhancement = true;
  int num_nodes = 7;
  int stem_channels = 16;
  bool augment = false;
  double weight_fraction = 0.5;
  uint64_t seed = 0;
};

void validate_block_search_config(const BlockSearchConfig& cfg);  // throws ConfigError

/// One row per architecture step. theta1/grad_theta are 0 when their guard
/// fired; phi is the applied amplification (0 during warmup or when disabled).
struct ArchStepRecord {
  int64_t step = 0;
  double x = 0.0;  // expected complexity before the update
  double y = 0.0;  // validation loss of the step
  double theta1 = 0.0;
  double grad_theta = 0.0;
  int sigma = 0;
  double phi = 0.0;
};

std::string trace_to_csv(const std::vector<ArchStepRecord>& trace);

struct BlockSearchResult {
  Genotype genotype;
  std::vector<ArchStepRecord> trace;
  double final_val_accuracy = 0.0;  // supernet accuracy on the alpha half
  int64_t derived_param_count = 0;  // genotype realized at the final geometry
  ArchParams arch;                  // post-search scores (for diagnostics)
};

/// Stage loop: per stage build a fresh-weight proxy of the stage's depth,
/// alternate (weight step on the train half, architecture step on the val
/// half), then prune down to the stage's op budget; derive the genotype after
/// the last stage. Alphas persist across stages; enhancement history and
/// warmup reset per stage.
BlockSearchResult progressive_search(const Dataset& ds, const BlockSearchConfig& cfg);

}  // namespace egdarts
