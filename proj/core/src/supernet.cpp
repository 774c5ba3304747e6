#include "egdarts/supernet.hpp"

#include <algorithm>
#include <cmath>

#include "egdarts/error.hpp"
#include "egdarts/ops.hpp"
#include "egdarts/util.hpp"

namespace egdarts {

std::vector<int> reduction_positions(int depth) {
  if (depth < 1) throw ConfigError("reduction_positions: depth must be >= 1");
  if (depth == 1) return {};
  if (depth == 2) return {1};
  return {depth / 3, 2 * depth / 3};
}

namespace {

TensorPtr he_conv_weight(int64_t c_out, int64_t c_in, int64_t k, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(c_in * k * k);
  return randn_tensor({c_out, c_in, k, k}, rng, std::sqrt(2.0 / fan_in), true);
}

/// Bring a raw cell input to (channels, spatial of the reference tensor):
/// parameter-free, so candidate ops account for every trainable scalar.
TensorPtr adapt_input(TensorPtr x, int64_t channels, const TensorPtr& spatial_ref) {
  while (x->shape[2] > spatial_ref->shape[2] || x->shape[3] > spatial_ref->shape[3])
    x = subsample2(x);
  if (x->shape[2] != spatial_ref->shape[2] || x->shape[3] != spatial_ref->shape[3])
    throw ShapeError("cell input spatial size " + std::to_string(x->shape[2]) + "x" +
                     std::to_string(x->shape[3]) + " cannot reach " +
                     std::to_string(spatial_ref->shape[2]) + "x" +
                     std::to_string(spatial_ref->shape[3]) + " by halving");
  return adapt_channels(x, channels);
}

}  // namespace

Supernet::Supernet(const SupernetConfig& cfg, ArchParams arch)
    : cfg_(cfg), arch_(std::move(arch)) {
  if (cfg_.depth < 1) throw ConfigError("supernet: depth must be >= 1");
  if (cfg_.num_nodes != arch_.num_nodes)
    throw ConfigError("supernet: config num_nodes " + std::to_string(cfg_.num_nodes) +
                      " != arch num_nodes " + std::to_string(arch_.num_nodes));
  const auto edges = cell_edges(cfg_.num_nodes);
  if (arch_.normal.edges.size() != edges.size() || arch_.reduce.edges.size() != edges.size())
    throw ConfigError("supernet: arch edge count does not match cell geometry");

  std::mt19937_64 rng(derive_seed(cfg_.seed, "supernet_weights"));
  stem_weight_ = he_conv_weight(cfg_.stem_channels, cfg_.in_channels, 3, rng);
  stem_weight_->name = "stem";
  weights_.push_back(stem_weight_);
  weight_names_.push_back("stem");

  const auto red_at = reduction_positions(cfg_.depth);
  int64_t channels = cfg_.stem_channels;
  for (int i = 0; i < cfg_.depth; ++i) {
    Cell cell;
    cell.reduction = std::find(red_at.begin(), red_at.end(), i) != red_at.end();
    if (cell.reduction) channels *= 2;
    cell.channels = channels;
    const CellArch& ca = cell.reduction ? arch_.reduce : arch_.normal;
    for (size_t e = 0; e < edges.size(); ++e) {
      const int stride = (cell.reduction && edges[e].src < 2) ? 2 : 1;
      std::vector<OpInstance> ops;
      ops.reserve(ca.edges[e].active.size());
      for (size_t o = 0; o < ca.edges[e].active.size(); ++o) {
        auto inst = make_op_instance(ca.edges[e].active[o], channels, channels, stride, rng);
        const std::string base = "cell" + std::to_string(i) + "/e" + std::to_string(e) + "/" +
                                 op_name(inst.kind);
        for (size_t p = 0; p < inst.params.size(); ++p) {
          inst.params[p]->name = base + "/p" + std::to_string(p);
          weights_.push_back(inst.params[p]);
          weight_names_.push_back(inst.params[p]->name);
        }
        ops.push_back(std::move(inst));
      }
      cell.edge_ops.push_back(std::move(ops));
    }
    cells_.push_back(std::move(cell));
  }

  const int64_t feat = cell_output_channels(cfg_.num_nodes, channels);
  fc_weight_ = randn_tensor({cfg_.num_classes, feat}, rng, std::sqrt(1.0 / static_cast<double>(feat)),
                            true);
  fc_weight_->name = "fc_w";
  fc_bias_ = make_tensor({cfg_.num_classes}, true);
  fc_bias_->name = "fc_b";
  weights_.push_back(fc_weight_);
  weight_names_.push_back("fc_w");
  weights_.push_back(fc_bias_);
  weight_names_.push_back("fc_b");
}

TensorPtr Supernet::forward(const TensorPtr& images) {
  if (images->shape.size() != 4 || images->shape[1] != cfg_.in_channels)
    throw ShapeError("supernet: expected (N, " + std::to_string(cfg_.in_channels) +
                     ", H, W) input");
  auto stem = batch_norm(conv2d_same(images, stem_weight_, 1));
  TensorPtr s0 = stem, s1 = stem;
  const auto edges = cell_edges(cfg_.num_nodes);
  for (auto& cell : cells_) {
    const CellArch& ca = cell.reduction ? arch_.reduce : arch_.normal;
    // Inputs arrive at the pre-reduction spatial size; stride-2 edge ops do
    // the halving inside a reduction cell.
    TensorPtr in0 = adapt_input(s0, cell.channels, s1);
    TensorPtr in1 = adapt_channels(s1, cell.channels);
    std::vector<TensorPtr> nodes{in0, in1};
    size_t e = 0;
    std::vector<TensorPtr> intermediates;
    for (int dst = 2; dst <= cfg_.num_nodes - 2; ++dst) {
      std::vector<TensorPtr> terms;
      for (int src = 0; src < dst; ++src, ++e)
        terms.push_back(mixed_edge_forward(nodes[static_cast<size_t>(src)], ca.edges[e],
                                           cell.edge_ops[e]));
      auto node = terms.size() == 1 ? terms[0] : add_n(terms);
      nodes.push_back(node);
      intermediates.push_back(node);
    }
    auto out = intermediates.size() == 1 ? intermediates[0] : concat_channels(intermediates);
    s0 = s1;
    s1 = out;
  }
  return linear(global_avg_pool(s1), fc_weight_, fc_bias_);
}

int64_t Supernet::fixed_param_count() const {
  int64_t n = stem_weight_->size();
  n += fc_weight_->size() + fc_bias_->size();
  return n;
}

double Supernet::expected_complexity() const {
  double total = static_cast<double>(fixed_param_count());
  for (const auto& cell : cells_) {
    const CellArch& ca = cell.reduction ? arch_.reduce : arch_.normal;
    for (size_t e = 0; e < ca.edges.size(); ++e) {
      const auto& alpha = ca.edges[e].alpha->data;
      double mx = alpha[0];
      for (double v : alpha) mx = std::max(mx, v);
      double z = 0.0;
      std::vector<double> w(alpha.size());
      for (size_t i = 0; i < alpha.size(); ++i) {
        w[i] = std::exp(alpha[i] - mx);
        z += w[i];
      }
      for (size_t i = 0; i < alpha.size(); ++i)
        total += w[i] / z *
                 static_cast<double>(op_param_count(ca.edges[e].active[i], cell.channels,
                                                    cell.channels));
    }
  }
  return total;
}

int64_t Supernet::genotype_param_count(const Genotype& g) const {
  validate_genotype(g);
  if (g.num_nodes != cfg_.num_nodes)
    throw ConfigError("genotype_param_count: node count mismatch");
  int64_t total = fixed_param_count();
  for (const auto& cell : cells_) {
    const auto& geno = cell.reduction ? g.reduce : g.normal;
    for (const auto& ge : geno)
      total += op_param_count(ge.op, cell.channels, cell.channels);
  }
  return total;
}

}  // namespace egdarts
