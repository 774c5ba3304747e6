#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "egdarts/search_space.hpp"
#include "egdarts/tensor.hpp"

namespace egdarts {

/// Macro-architecture genome searched at the network level. v0 is the stem
/// channel count, v1..v3 the normal-block counts of the three stages, v4/v5
/// the channel multipliers applied at the two reduction blocks. Cell
/// genotypes ride along unchanged.
struct NetworkGenome {
  int v0 = 16;
  int v1 = 1;
  int v2 = 1;
  int v3 = 1;
  double v4 = 1.0;
  double v5 = 1.0;
  Genotype cells;
};

struct GenomeBounds {
  int v0_min = 8, v0_max = 60;
  int vblk_min = 1, vblk_max = 6;   // v1, v2, v3
  double vmul_min = 1.0, vmul_max = 3.0;  // v4, v5
};

void validate_genome(const NetworkGenome& g, const GenomeBounds& bounds = {});

int genome_depth(const NetworkGenome& g);  // v1 + v2 + v3

/// Channel schedule: c1 = v0, c2 = round_half_up(c1*v4), c3 = round_half_up(c2*v5).
int64_t scaled_channels(int64_t base, double multiplier);

std::string genome_to_json(const NetworkGenome& g);
NetworkGenome genome_from_json(const std::string& text);

/// Canonical key for memoization and per-individual seeding.
std::string genome_key(const NetworkGenome& g);

/// Closed-form trainable parameter count of the decoded network; equals
/// Network::count_params() without allocating anything.
int64_t genome_param_count(const NetworkGenome& g, int num_classes, int in_channels);

/// A concrete trainable network decoded from a genome:
/// stem conv -> v1 normal cells @ c1 -> reduction @ c2 -> v2 normal @ c2
/// -> reduction @ c3 -> v3 normal @ c3 -> global average pool -> classifier.
class Network {
 public:
  Network(const NetworkGenome& genome, int num_classes, int in_channels, int input_h, int input_w,
          uint64_t seed);

  TensorPtr forward(const TensorPtr& images);

  const std::vector<TensorPtr>& weights() const { return weights_; }
  const std::vector<std::string>& weight_names() const { return weight_names_; }

  /// Exact number of trainable scalars (fixed buffers excluded).
  int64_t count_params() const;
  /// Multiply-accumulate count (x2) of one forward pass at the build-time
  /// input size; convolutions and the classifier only.
  int64_t count_flops() const;

  const NetworkGenome& genome() const { return genome_; }
  int num_classes() const { return num_classes_; }

 private:
  struct CellInst {
    bool reduction = false;
    int64_t channels = 0;
    std::vector<OpInstance> ops;  // aligned with the genotype edge list
  };

  NetworkGenome genome_;
  int num_classes_ = 0;
  int in_channels_ = 3;
  int input_h_ = 0;
  int input_w_ = 0;
  TensorPtr stem_weight_;
  TensorPtr fc_weight_;
  TensorPtr fc_bias_;
  std::vector<CellInst> cells_;
  std::vector<TensorPtr> weights_;
  std::vector<std::string> weight_names_;
};

}  // namespace egdarts
