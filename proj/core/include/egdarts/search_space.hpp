#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "egdarts/tensor.hpp"

namespace egdarts {

/// The candidate operation set searched on every cell edge. Order is part of
/// the contract: pruning and argmax tie-breaks resolve toward lower index.
enum class CandidateOp : int {
  skip_connect = 0,
  max_pool_3x3,
  avg_pool_3x3,
  eca_net_3x3,
  sep_conv_3x3,
  sep_conv_5x5,
  sep_conv_7x7,
  dil_conv_3x3,
  dil_conv_5x5,
  lbcnn_3x3,
  lbcnn_5x5,
  conv_7x1_1x7,
};

inline constexpr int kNumCandidateOps = 12;

std::array<CandidateOp, kNumCandidateOps> all_candidate_ops();
const char* op_name(CandidateOp op);
CandidateOp op_from_name(std::string_view name);  // throws ConfigError on unknown name

/// Trainable scalar count for one instance of `op` mapping c_in -> c_out
/// channels. Normalization layers are affine-free, so they contribute 0.
int64_t op_param_count(CandidateOp op, int64_t c_in, int64_t c_out);

/// One instantiated candidate op: parameter tensors plus fixed buffers (the
/// ternary depthwise kernels keep their seeded pattern and never train).
struct OpInstance {
  CandidateOp kind = CandidateOp::skip_connect;
  int64_t c_in = 0;
  int64_t c_out = 0;
  int stride = 1;
  std::vector<TensorPtr> params;
  std::vector<TensorPtr> buffers;
};

OpInstance make_op_instance(CandidateOp op, int64_t c_in, int64_t c_out, int stride,
                            std::mt19937_64& rng);
TensorPtr op_forward(const OpInstance& op, const TensorPtr& x);

// Cell geometry. Nodes 0 and 1 are the cell inputs, nodes 2..N-2 are the
// intermediates, node N-1 is the channel-concat output. Edges are every
// (src < dst) pair into an intermediate, ordered by dst then src.
struct CellEdge {
  int src = 0;
  int dst = 0;
};

std::vector<CellEdge> cell_edges(int num_nodes);
int cell_num_intermediates(int num_nodes);
int64_t cell_output_channels(int num_nodes, int64_t node_channels);

/// Architecture parameters for one cell type: per edge, a trainable score
/// vector over that edge's currently-active ops.
struct EdgeAlpha {
  TensorPtr alpha;
  std::vector<CandidateOp> active;
};

struct CellArch {
  std::vector<EdgeAlpha> edges;  // aligned with cell_edges(num_nodes)
};

struct ArchParams {
  int num_nodes = 7;
  CellArch normal;
  CellArch reduce;
};

/// All 12 ops active per edge; alpha = 0 plus seeded N(0, 1e-3) noise so the
/// initial softmax is near-uniform but ties are broken deterministically.
ArchParams init_arch_params(int num_nodes, uint64_t seed);

std::vector<TensorPtr> alpha_tensors(const ArchParams& arch);

/// Drops the drop_k smallest-alpha ops on every edge of both cell types.
/// Boundary ties drop the lower op index. Surviving entries keep their raw
/// values (the softmax renormalizes implicitly).
void prune_ops(ArchParams& arch, int drop_k);

struct GenoEdge {
  CandidateOp op = CandidateOp::skip_connect;
  int src = 0;
};

/// Discrete cell description: per intermediate node, exactly two retained
/// (op, source) pairs, flattened in node order (sources ascending per node).
struct Genotype {
  int num_nodes = 7;
  std::vector<GenoEdge> normal;
  std::vector<GenoEdge> reduce;
};

/// Argmax op per edge, then per node keep the two incoming edges with the
/// largest max softmax weight. Ties: lower op index / lower source id.
Genotype derive_genotype(const ArchParams& arch);

void validate_genotype(const Genotype& g);  // throws ConfigError

std::string genotype_to_json(const Genotype& g);
Genotype genotype_from_json(const std::string& text);

/// Softmax-relaxed mixed edge: sum_o softmax(alpha)_o * o(x). `ops` must be
/// aligned with `edge.active`.
TensorPtr mixed_edge_forward(const TensorPtr& x, const EdgeAlpha& edge,
                             const std::vector<OpInstance>& ops);

}  // namespace egdarts
