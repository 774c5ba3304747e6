#include "egdarts/search_space.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "egdarts/error.hpp"
#include "egdarts/ops.hpp"
#include "egdarts/util.hpp"

namespace egdarts {

namespace {

constexpr const char* kOpNames[kNumCandidateOps] = {
    "skip_connect", "max_pool_3x3", "avg_pool_3x3", "eca_net_3x3",
    "sep_conv_3x3", "sep_conv_5x5", "sep_conv_7x7", "dil_conv_3x3",
    "dil_conv_5x5", "lbcnn_3x3",    "lbcnn_5x5",    "conv_7x1_1x7",
};

// He-normal conv weight: fan_in = (c_in/groups)*kh*kw.
TensorPtr conv_weight(int64_t c_out, int64_t c_in_per_group, int64_t kh, int64_t kw,
                      std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(c_in_per_group * kh * kw);
  return randn_tensor({c_out, c_in_per_group, kh, kw}, rng, std::sqrt(2.0 / fan_in), true);
}

// Fixed ternary depthwise kernel with entries drawn uniformly from {-1,0,+1}.
TensorPtr ternary_kernel(int64_t channels, int64_t k, std::mt19937_64& rng) {
  auto t = make_tensor({channels, 1, k, k}, false);
  std::uniform_int_distribution<int> dist(-1, 1);
  for (double& v : t->data) v = static_cast<double>(dist(rng));
  return t;
}

int kernel_of(CandidateOp op) {
  switch (op) {
    case CandidateOp::sep_conv_3x3:
    case CandidateOp::dil_conv_3x3:
    case CandidateOp::lbcnn_3x3:
      return 3;
    case CandidateOp::sep_conv_5x5:
    case CandidateOp::dil_conv_5x5:
    case CandidateOp::lbcnn_5x5:
      return 5;
    case CandidateOp::sep_conv_7x7:
      return 7;
    default:
      return 0;
  }
}

}  // namespace

std::array<CandidateOp, kNumCandidateOps> all_candidate_ops() {
  std::array<CandidateOp, kNumCandidateOps> ops{};
  for (int i = 0; i < kNumCandidateOps; ++i) ops[static_cast<size_t>(i)] = CandidateOp(i);
  return ops;
}

const char* op_name(CandidateOp op) { return kOpNames[static_cast<int>(op)]; }

CandidateOp op_from_name(std::string_view name) {
  for (int i = 0; i < kNumCandidateOps; ++i)
    if (name == kOpNames[i]) return CandidateOp(i);
  throw ConfigError("unknown candidate op '" + std::string(name) + "'");
}

int64_t op_param_count(CandidateOp op, int64_t c_in, int64_t c_out) {
  const int64_t k = kernel_of(op);
  switch (op) {
    case CandidateOp::skip_connect:
    case CandidateOp::max_pool_3x3:
    case CandidateOp::avg_pool_3x3:
      return 0;
    case CandidateOp::eca_net_3x3:
      return 3;
    case CandidateOp::sep_conv_3x3:
    case CandidateOp::sep_conv_5x5:
    case CandidateOp::sep_conv_7x7:
      // Two (depthwise, pointwise) passes; the second maps c_out -> c_out.
      return c_in * k * k + c_in * c_out + c_out * k * k + c_out * c_out;
    case CandidateOp::dil_conv_3x3:
    case CandidateOp::dil_conv_5x5:
      return c_in * k * k + c_in * c_out;
    case CandidateOp::lbcnn_3x3:
    case CandidateOp::lbcnn_5x5:
      // The ternary depthwise kernel is fixed; only the 1x1 conv trains.
      return c_in * c_out;
    case CandidateOp::conv_7x1_1x7:
      return 7 * c_in * c_out + 7 * c_out * c_out;
  }
  throw ConfigError("op_param_count: unhandled op");
}

OpInstance make_op_instance(CandidateOp op, int64_t c_in, int64_t c_out, int stride,
                            std::mt19937_64& rng) {
  if (c_in < 1 || c_out < 1) throw ConfigError("make_op_instance: channel counts must be >= 1");
  if (stride != 1 && stride != 2) throw ConfigError("make_op_instance: stride must be 1 or 2");
  OpInstance inst;
  inst.kind = op;
  inst.c_in = c_in;
  inst.c_out = c_out;
  inst.stride = stride;
  const int64_t k = kernel_of(op);
  switch (op) {
    case CandidateOp::skip_connect:
    case CandidateOp::max_pool_3x3:
    case CandidateOp::avg_pool_3x3:
      break;
    case CandidateOp::eca_net_3x3:
      inst.params.push_back(conv_weight(1, 1, 1, 3, rng));
      break;
    case CandidateOp::sep_conv_3x3:
    case CandidateOp::sep_conv_5x5:
    case CandidateOp::sep_conv_7x7:
      inst.params.push_back(conv_weight(c_in, 1, k, k, rng));
      inst.params.push_back(conv_weight(c_out, c_in, 1, 1, rng));
      inst.params.push_back(conv_weight(c_out, 1, k, k, rng));
      inst.params.push_back(conv_weight(c_out, c_out, 1, 1, rng));
      break;
    case CandidateOp::dil_conv_3x3:
    case CandidateOp::dil_conv_5x5:
      inst.params.push_back(conv_weight(c_in, 1, k, k, rng));
      inst.params.push_back(conv_weight(c_out, c_in, 1, 1, rng));
      break;
    case CandidateOp::lbcnn_3x3:
    case CandidateOp::lbcnn_5x5:
      inst.buffers.push_back(ternary_kernel(c_in, k, rng));
      inst.params.push_back(conv_weight(c_out, c_in, 1, 1, rng));
      break;
    case CandidateOp::conv_7x1_1x7:
      inst.params.push_back(conv_weight(c_out, c_in, 1, 7, rng));
      inst.params.push_back(conv_weight(c_out, c_out, 7, 1, rng));
      break;
  }
  return inst;
}

TensorPtr op_forward(const OpInstance& op, const TensorPtr& x) {
  if (x->shape.size() != 4 || x->shape[1] != op.c_in)
    throw ShapeError(std::string("op_forward(") + op_name(op.kind) + "): input channels " +
                     std::to_string(x->shape.size() == 4 ? x->shape[1] : -1) + ", expected " +
                     std::to_string(op.c_in));
  const int s = op.stride;
  switch (op.kind) {
    case CandidateOp::skip_connect: {
      TensorPtr h = s == 2 ? subsample2(x) : x;
      return adapt_channels(h, op.c_out);
    }
    case CandidateOp::max_pool_3x3:
      return batch_norm(adapt_channels(max_pool3x3(x, s), op.c_out));
    case CandidateOp::avg_pool_3x3:
      return batch_norm(adapt_channels(avg_pool3x3(x, s), op.c_out));
    case CandidateOp::eca_net_3x3: {
      TensorPtr h = s == 2 ? subsample2(x) : x;
      h = adapt_channels(h, op.c_out);
      auto desc = global_avg_pool(h);  // (N, C)
      const int64_t n = desc->shape[0], c = desc->shape[1];
      auto gate = reshape(desc, {n, 1, 1, c});
      Conv2dSpec spec;
      spec.pad_w = 1;
      gate = conv2d(gate, op.params[0], spec);
      gate = sigmoid(reshape(gate, {n, c}));
      return channel_scale(h, gate);
    }
    case CandidateOp::sep_conv_3x3:
    case CandidateOp::sep_conv_5x5:
    case CandidateOp::sep_conv_7x7: {
      auto h = relu(x);
      h = conv2d_same(h, op.params[0], s, 1, static_cast<int>(op.c_in));
      h = conv2d_same(h, op.params[1], 1);
      h = batch_norm(h);
      h = relu(h);
      h = conv2d_same(h, op.params[2], 1, 1, static_cast<int>(op.c_out));
      h = conv2d_same(h, op.params[3], 1);
      return batch_norm(h);
    }
    case CandidateOp::dil_conv_3x3:
    case CandidateOp::dil_conv_5x5: {
      auto h = relu(x);
      h = conv2d_same(h, op.params[0], s, 2, static_cast<int>(op.c_in));
      h = conv2d_same(h, op.params[1], 1);
      return batch_norm(h);
    }
    case CandidateOp::lbcnn_3x3:
    case CandidateOp::lbcnn_5x5: {
      auto h = relu(x);
      h = conv2d_same(h, op.buffers[0], s, 1, static_cast<int>(op.c_in));
      h = conv2d_same(h, op.params[0], 1);
      return batch_norm(h);
    }
    case CandidateOp::conv_7x1_1x7: {
      auto h = relu(x);
      Conv2dSpec row;  // (1 x 7)
      row.stride_w = s;
      row.pad_w = 3;
      h = conv2d(h, op.params[0], row);
      Conv2dSpec col;  // (7 x 1)
      col.stride_h = s;
      col.pad_h = 3;
      h = conv2d(h, op.params[1], col);
      return batch_norm(h);
    }
  }
  throw ConfigError("op_forward: unhandled op");
}

std::vector<CellEdge> cell_edges(int num_nodes) {
  if (num_nodes < 4) throw ConfigError("cell_edges: need at least 4 nodes (2 in, 1 mid, 1 out)");
  std::vector<CellEdge> edges;
  for (int dst = 2; dst <= num_nodes - 2; ++dst)
    for (int src = 0; src < dst; ++src) edges.push_back({src, dst});
  return edges;
}

int cell_num_intermediates(int num_nodes) { return num_nodes - 3; }

int64_t cell_output_channels(int num_nodes, int64_t node_channels) {
  return static_cast<int64_t>(cell_num_intermediates(num_nodes)) * node_channels;
}

ArchParams init_arch_params(int num_nodes, uint64_t seed) {
  ArchParams arch;
  arch.num_nodes = num_nodes;
  const auto edges = cell_edges(num_nodes);
  std::mt19937_64 rng(derive_seed(seed, "alpha_init"));
  const auto ops = all_candidate_ops();
  for (CellArch* cell : {&arch.normal, &arch.reduce}) {
    for (size_t e = 0; e < edges.size(); ++e) {
      EdgeAlpha ea;
      ea.alpha = randn_tensor({kNumCandidateOps}, rng, 1e-3, true);
      ea.alpha->name = std::string(cell == &arch.normal ? "alpha_normal_e" : "alpha_reduce_e") +
                       std::to_string(e);
      ea.active.assign(ops.begin(), ops.end());
      cell->edges.push_back(std::move(ea));
    }
  }
  return arch;
}

std::vector<TensorPtr> alpha_tensors(const ArchParams& arch) {
  std::vector<TensorPtr> out;
  for (const CellArch* cell : {&arch.normal, &arch.reduce})
    for (const auto& e : cell->edges) out.push_back(e.alpha);
  return out;
}

void prune_ops(ArchParams& arch, int drop_k) {
  if (drop_k <= 0) throw ConfigError("prune_ops: drop_k must be positive");
  for (CellArch* cell : {&arch.normal, &arch.reduce}) {
    for (auto& edge : cell->edges) {
      const int n = static_cast<int>(edge.active.size());
      if (drop_k >= n)
        throw ConfigError("prune_ops: drop_k " + std::to_string(drop_k) +
                          " >= active op count " + std::to_string(n));
      // Sort positions by (alpha asc, position asc); the first drop_k go.
      std::vector<int> order(static_cast<size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (edge.alpha->data[static_cast<size_t>(a)] != edge.alpha->data[static_cast<size_t>(b)])
          return edge.alpha->data[static_cast<size_t>(a)] < edge.alpha->data[static_cast<size_t>(b)];
        return edge.active[static_cast<size_t>(a)] < edge.active[static_cast<size_t>(b)];
      });
      std::vector<bool> keep(static_cast<size_t>(n), true);
      for (int i = 0; i < drop_k; ++i) keep[static_cast<size_t>(order[static_cast<size_t>(i)])] = false;
      std::vector<CandidateOp> new_active;
      std::vector<double> new_alpha;
      for (int i = 0; i < n; ++i) {
        if (!keep[static_cast<size_t>(i)]) continue;
        new_active.push_back(edge.active[static_cast<size_t>(i)]);
        new_alpha.push_back(edge.alpha->data[static_cast<size_t>(i)]);
      }
      auto t = make_tensor({static_cast<int64_t>(new_alpha.size())}, std::move(new_alpha), true);
      t->name = edge.alpha->name;
      edge.alpha = std::move(t);
      edge.active = std::move(new_active);
    }
  }
}

namespace {

std::vector<double> softmax_values(const std::vector<double>& v) {
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  double z = 0.0;
  std::vector<double> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    z += out[i];
  }
  for (double& x : out) x /= z;
  return out;
}

std::vector<GenoEdge> derive_cell(const CellArch& cell, int num_nodes) {
  const auto edges = cell_edges(num_nodes);
  struct Pick {
    int src;
    CandidateOp op;
    double weight;
  };
  // Per edge: argmax op (tie -> lower index) and its softmax weight.
  std::vector<Pick> picks(edges.size());
  for (size_t e = 0; e < edges.size(); ++e) {
    const auto& ea = cell.edges[e];
    const auto w = softmax_values(ea.alpha->data);
    size_t best = 0;
    for (size_t i = 1; i < w.size(); ++i)
      if (w[i] > w[best]) best = i;
    picks[e] = {edges[e].src, ea.active[best], w[best]};
  }
  // Per node: keep the two incoming edges with the largest weight; ties favor
  // the lower source id. Incoming edges are contiguous and src-ordered.
  std::vector<GenoEdge> out;
  size_t e = 0;
  for (int dst = 2; dst <= num_nodes - 2; ++dst) {
    const size_t first = e;
    const size_t count = static_cast<size_t>(dst);
    e += count;
    std::vector<size_t> idx(count);
    std::iota(idx.begin(), idx.end(), first);
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
      if (picks[a].weight != picks[b].weight) return picks[a].weight > picks[b].weight;
      return picks[a].src < picks[b].src;
    });
    std::vector<size_t> kept(idx.begin(), idx.begin() + 2);
    std::sort(kept.begin(), kept.end(),
              [&](size_t a, size_t b) { return picks[a].src < picks[b].src; });
    for (size_t k : kept) out.push_back({picks[k].op, picks[k].src});
  }
  return out;
}

}  // namespace

Genotype derive_genotype(const ArchParams& arch) {
  Genotype g;
  g.num_nodes = arch.num_nodes;
  g.normal = derive_cell(arch.normal, arch.num_nodes);
  g.reduce = derive_cell(arch.reduce, arch.num_nodes);
  validate_genotype(g);
  return g;
}

void validate_genotype(const Genotype& g) {
  if (g.num_nodes < 4) throw ConfigError("genotype: nodes must be >= 4");
  const size_t expected = 2 * static_cast<size_t>(cell_num_intermediates(g.num_nodes));
  for (const auto* cell : {&g.normal, &g.reduce}) {
    const char* which = cell == &g.normal ? "normal" : "reduce";
    if (cell->size() != expected)
      throw ConfigError(std::string("genotype: ") + which + " cell has " +
                        std::to_string(cell->size()) + " edges, expected " +
                        std::to_string(expected));
    for (size_t i = 0; i < cell->size(); i += 2) {
      const int dst = 2 + static_cast<int>(i / 2);
      const GenoEdge& a = (*cell)[i];
      const GenoEdge& b = (*cell)[i + 1];
      if (a.src < 0 || a.src >= dst || b.src < 0 || b.src >= dst)
        throw ConfigError(std::string("genotype: ") + which + " node " + std::to_string(dst) +
                          " has a source outside [0, " + std::to_string(dst) + ")");
      if (a.src == b.src)
        throw ConfigError(std::string("genotype: ") + which + " node " + std::to_string(dst) +
                          " uses source " + std::to_string(a.src) + " twice");
    }
  }
}

std::string genotype_to_json(const Genotype& g) {
  nlohmann::json j;
  j["nodes"] = g.num_nodes;
  for (const auto* cell : {&g.normal, &g.reduce}) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : *cell) arr.push_back({op_name(e.op), e.src});
    j[cell == &g.normal ? "normal" : "reduce"] = std::move(arr);
  }
  return j.dump(2) + "\n";
}

Genotype genotype_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("genotype: invalid JSON: ") + e.what());
  }
  Genotype g;
  try {
    g.num_nodes = j.at("nodes").get<int>();
    for (auto* cell : {&g.normal, &g.reduce}) {
      for (const auto& e : j.at(cell == &g.normal ? "normal" : "reduce")) {
        GenoEdge ge;
        ge.op = op_from_name(e.at(0).get<std::string>());
        ge.src = e.at(1).get<int>();
        cell->push_back(ge);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("genotype: missing or malformed field: ") + e.what());
  }
  validate_genotype(g);
  return g;
}

TensorPtr mixed_edge_forward(const TensorPtr& x, const EdgeAlpha& edge,
                             const std::vector<OpInstance>& ops) {
  if (edge.active.empty()) throw ConfigError("mixed_edge_forward: empty op set");
  if (ops.size() != edge.active.size())
    throw ConfigError("mixed_edge_forward: instance count " + std::to_string(ops.size()) +
                      " != active op count " + std::to_string(edge.active.size()));
  std::vector<TensorPtr> outs;
  outs.reserve(ops.size());
  for (const auto& op : ops) outs.push_back(op_forward(op, x));
  return weighted_sum(outs, softmax_vec(edge.alpha));
}

}  // namespace egdarts
