#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "egdarts/search_space.hpp"
#include "egdarts/tensor.hpp"

namespace egdarts {

struct SupernetConfig {
  int depth = 5;          // number of cells
  int num_nodes = 7;      // nodes per cell (2 inputs + intermediates + concat)
  int stem_channels = 16; // node channels before the first reduction
  int num_classes = 10;
  int in_channels = 3;
  uint64_t seed = 0;
};

/// Cell indices that run as reduction cells: {depth/3, 2*depth/3} for
/// depth >= 3, {1} for depth 2, empty for depth 1.
std::vector<int> reduction_positions(int depth);

/// Weight-sharing proxy network: a stack of cells whose every edge computes a
/// softmax-weighted mixture of its active candidate ops. Alpha tensors are
/// aliased from the ArchParams passed in (shared across same-type cells);
/// operation weights are owned here and freshly initialized from the seed.
class Supernet {
 public:
  struct Cell {
    bool reduction = false;
    int64_t channels = 0;
    // edge_ops[e][o] instantiates active op o of edge e.
    std::vector<std::vector<OpInstance>> edge_ops;
  };

  Supernet(const SupernetConfig& cfg, ArchParams arch);

  /// images (N, in_channels, H, W) -> logits (N, num_classes)
  TensorPtr forward(const TensorPtr& images);

  const std::vector<TensorPtr>& weights() const { return weights_; }
  const std::vector<std::string>& weight_names() const { return weight_names_; }
  std::vector<TensorPtr> alphas() const { return alpha_tensors(arch_); }

  /// Softmax-expected trainable parameter count of the architecture encoded
  /// by the current alphas: stem + classifier constant plus, per cell edge,
  /// the expected op parameter count.
  double expected_complexity() const;
  int64_t fixed_param_count() const;

  /// Exact parameter count of a discrete genotype realized at this supernet's
  /// geometry (same depth / channel schedule), stem and classifier included.
  int64_t genotype_param_count(const Genotype& g) const;

  ArchParams& arch() { return arch_; }
  const ArchParams& arch() const { return arch_; }
  const SupernetConfig& config() const { return cfg_; }
  const std::vector<Cell>& cells() const { return cells_; }

 private:
  SupernetConfig cfg_;
  ArchParams arch_;
  std::vector<Cell> cells_;
  TensorPtr stem_weight_;
  TensorPtr fc_weight_;
  TensorPtr fc_bias_;
  std::vector<TensorPtr> weights_;
  std::vector<std::string> weight_names_;
};

}  // namespace egdarts
