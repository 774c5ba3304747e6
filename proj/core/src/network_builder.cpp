#include "egdarts/network_builder.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "egdarts/error.hpp"
#include "egdarts/ops.hpp"
#include "egdarts/util.hpp"

namespace egdarts {

void validate_genome(const NetworkGenome& g, const GenomeBounds& b) {
  const auto check_int = [](const char* field, int v, int lo, int hi) {
    if (v < lo || v > hi)
      throw ConfigError(std::string("genome.") + field + ": " + std::to_string(v) +
                        " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  };
  check_int("v0", g.v0, b.v0_min, b.v0_max);
  check_int("v1", g.v1, b.vblk_min, b.vblk_max);
  check_int("v2", g.v2, b.vblk_min, b.vblk_max);
  check_int("v3", g.v3, b.vblk_min, b.vblk_max);
  for (const auto& [field, v] : {std::pair{"v4", g.v4}, std::pair{"v5", g.v5}}) {
    if (!std::isfinite(v) || v < b.vmul_min || v > b.vmul_max)
      throw ConfigError(std::string("genome.") + field + ": " + std::to_string(v) +
                        " outside [" + std::to_string(b.vmul_min) + ", " +
                        std::to_string(b.vmul_max) + "]");
  }
  validate_genotype(g.cells);
}

int genome_depth(const NetworkGenome& g) { return g.v1 + g.v2 + g.v3; }

int64_t scaled_channels(int64_t base, double multiplier) {
  return static_cast<int64_t>(std::floor(static_cast<double>(base) * multiplier + 0.5));
}

std::string genome_to_json(const NetworkGenome& g) {
  nlohmann::json j;
  j["v0"] = g.v0;
  j["v1"] = g.v1;
  j["v2"] = g.v2;
  j["v3"] = g.v3;
  j["v4"] = g.v4;
  j["v5"] = g.v5;
  for (const auto* cell : {&g.cells.normal, &g.cells.reduce}) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : *cell) arr.push_back({op_name(e.op), e.src});
    j[cell == &g.cells.normal ? "normal" : "reduce"] = std::move(arr);
  }
  return j.dump(2) + "\n";
}

NetworkGenome genome_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("genome: invalid JSON: ") + e.what());
  }
  NetworkGenome g;
  try {
    g.v0 = j.at("v0").get<int>();
    g.v1 = j.at("v1").get<int>();
    g.v2 = j.at("v2").get<int>();
    g.v3 = j.at("v3").get<int>();
    g.v4 = j.at("v4").get<double>();
    g.v5 = j.at("v5").get<double>();
    for (auto* cell : {&g.cells.normal, &g.cells.reduce}) {
      for (const auto& e : j.at(cell == &g.cells.normal ? "normal" : "reduce")) {
        GenoEdge ge;
        ge.op = op_from_name(e.at(0).get<std::string>());
        ge.src = e.at(1).get<int>();
        cell->push_back(ge);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("genome: missing or malformed field: ") + e.what());
  }
  if (g.cells.normal.size() % 2 != 0 || g.cells.normal.size() != g.cells.reduce.size())
    throw ConfigError("genome: cell edge lists must have equal even lengths");
  g.cells.num_nodes = static_cast<int>(g.cells.normal.size()) / 2 + 3;
  validate_genotype(g.cells);
  return g;
}

std::string genome_key(const NetworkGenome& g) {
  nlohmann::json j = nlohmann::json::parse(genome_to_json(g));
  return j.dump();  // compact canonical form
}

namespace {

TensorPtr he_conv_weight(int64_t c_out, int64_t c_in, int64_t k, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(c_in * k * k);
  return randn_tensor({c_out, c_in, k, k}, rng, std::sqrt(2.0 / fan_in), true);
}

}  // namespace

Network::Network(const NetworkGenome& genome, int num_classes, int in_channels, int input_h,
                 int input_w, uint64_t seed)
    : genome_(genome), num_classes_(num_classes), in_channels_(in_channels), input_h_(input_h),
      input_w_(input_w) {
  validate_genotype(genome_.cells);
  if (num_classes_ < 2) throw ConfigError("network: num_classes must be >= 2");
  if (input_h_ < 4 || input_w_ < 4)
    throw ConfigError("network: input " + std::to_string(input_h_) + "x" +
                      std::to_string(input_w_) +
                      " too small to survive two spatial halvings");

  std::mt19937_64 rng(derive_seed(seed, "network_weights"));
  stem_weight_ = he_conv_weight(genome_.v0, in_channels_, 3, rng);
  stem_weight_->name = "stem";
  weights_.push_back(stem_weight_);
  weight_names_.push_back("stem");

  const int num_nodes = genome_.cells.num_nodes;
  const auto edges_of = [&](const std::vector<GenoEdge>& geno) { return geno; };
  const int64_t c1 = genome_.v0;
  const int64_t c2 = scaled_channels(c1, genome_.v4);
  const int64_t c3 = scaled_channels(c2, genome_.v5);

  // Stage layout: v1 normal @ c1, reduction @ c2, v2 normal @ c2,
  // reduction @ c3, v3 normal @ c3.
  struct Slot {
    bool reduction;
    int64_t channels;
  };
  std::vector<Slot> slots;
  for (int i = 0; i < genome_.v1; ++i) slots.push_back({false, c1});
  slots.push_back({true, c2});
  for (int i = 0; i < genome_.v2; ++i) slots.push_back({false, c2});
  slots.push_back({true, c3});
  for (int i = 0; i < genome_.v3; ++i) slots.push_back({false, c3});

  for (size_t ci = 0; ci < slots.size(); ++ci) {
    CellInst cell;
    cell.reduction = slots[ci].reduction;
    cell.channels = slots[ci].channels;
    const auto& geno = cell.reduction ? genome_.cells.reduce : genome_.cells.normal;
    for (size_t e = 0; e < edges_of(geno).size(); ++e) {
      const int stride = (cell.reduction && geno[e].src < 2) ? 2 : 1;
      auto inst = make_op_instance(geno[e].op, cell.channels, cell.channels, stride, rng);
      const std::string base =
          "cell" + std::to_string(ci) + "/g" + std::to_string(e) + "/" + op_name(inst.kind);
      for (size_t p = 0; p < inst.params.size(); ++p) {
        inst.params[p]->name = base + "/p" + std::to_string(p);
        weights_.push_back(inst.params[p]);
        weight_names_.push_back(inst.params[p]->name);
      }
      cell.ops.push_back(std::move(inst));
    }
    cells_.push_back(std::move(cell));
  }

  const int64_t feat = cell_output_channels(num_nodes, c3);
  fc_weight_ = randn_tensor({num_classes_, feat}, rng,
                            std::sqrt(1.0 / static_cast<double>(feat)), true);
  fc_weight_->name = "fc_w";
  fc_bias_ = make_tensor({num_classes_}, true);
  fc_bias_->name = "fc_b";
  weights_.push_back(fc_weight_);
  weight_names_.push_back("fc_w");
  weights_.push_back(fc_bias_);
  weight_names_.push_back("fc_b");
}

namespace {

TensorPtr adapt_cell_input(TensorPtr x, int64_t channels, const TensorPtr& spatial_ref) {
  while (x->shape[2] > spatial_ref->shape[2] || x->shape[3] > spatial_ref->shape[3])
    x = subsample2(x);
  return adapt_channels(x, channels);
}

}  // namespace

TensorPtr Network::forward(const TensorPtr& images) {
  if (images->shape.size() != 4 || images->shape[1] != in_channels_ ||
      images->shape[2] != input_h_ || images->shape[3] != input_w_)
    throw ShapeError("network: input must be (N, " + std::to_string(in_channels_) + ", " +
                     std::to_string(input_h_) + ", " + std::to_string(input_w_) + ")");
  auto stem = batch_norm(conv2d_same(images, stem_weight_, 1));
  TensorPtr s0 = stem, s1 = stem;
  const int num_nodes = genome_.cells.num_nodes;
  for (auto& cell : cells_) {
    TensorPtr in0 = adapt_cell_input(s0, cell.channels, s1);
    TensorPtr in1 = adapt_channels(s1, cell.channels);
    std::vector<TensorPtr> nodes{in0, in1};
    std::vector<TensorPtr> intermediates;
    const auto& geno = cell.reduction ? genome_.cells.reduce : genome_.cells.normal;
    for (int dst = 2; dst <= num_nodes - 2; ++dst) {
      const size_t e = static_cast<size_t>(2 * (dst - 2));
      auto a = op_forward(cell.ops[e], nodes[static_cast<size_t>(geno[e].src)]);
      auto b = op_forward(cell.ops[e + 1], nodes[static_cast<size_t>(geno[e + 1].src)]);
      auto node = add(a, b);
      nodes.push_back(node);
      intermediates.push_back(node);
    }
    auto out = intermediates.size() == 1 ? intermediates[0] : concat_channels(intermediates);
    s0 = s1;
    s1 = out;
  }
  return linear(global_avg_pool(s1), fc_weight_, fc_bias_);
}

int64_t Network::count_params() const {
  int64_t n = 0;
  for (const auto& w : weights_) n += w->size();
  return n;
}

namespace {

int64_t ceil_half(int64_t v) { return (v + 1) / 2; }

/// MAC*2 count of one op instance applied at (h, w): mirrors op_forward.
int64_t op_flops(CandidateOp op, int64_t c_in, int64_t c_out, int64_t h, int64_t w, int stride) {
  const int64_t ho = stride == 2 ? ceil_half(h) : h;
  const int64_t wo = stride == 2 ? ceil_half(w) : w;
  const int64_t hw_o = ho * wo;
  switch (op) {
    case CandidateOp::skip_connect:
    case CandidateOp::max_pool_3x3:
    case CandidateOp::avg_pool_3x3:
      return 0;
    case CandidateOp::eca_net_3x3:
      return 2 * 3 * c_out;  // 1-D conv over the channel descriptor
    case CandidateOp::sep_conv_3x3:
    case CandidateOp::sep_conv_5x5:
    case CandidateOp::sep_conv_7x7: {
      const int64_t k = op == CandidateOp::sep_conv_3x3 ? 3
                        : op == CandidateOp::sep_conv_5x5 ? 5
                                                          : 7;
      return 2 * hw_o * (k * k * c_in + c_in * c_out + k * k * c_out + c_out * c_out);
    }
    case CandidateOp::dil_conv_3x3:
    case CandidateOp::dil_conv_5x5: {
      const int64_t k = op == CandidateOp::dil_conv_3x3 ? 3 : 5;
      return 2 * hw_o * (k * k * c_in + c_in * c_out);
    }
    case CandidateOp::lbcnn_3x3:
    case CandidateOp::lbcnn_5x5: {
      // The fixed ternary kernel still computes MACs.
      const int64_t k = op == CandidateOp::lbcnn_3x3 ? 3 : 5;
      return 2 * hw_o * (k * k * c_in + c_in * c_out);
    }
    case CandidateOp::conv_7x1_1x7: {
      const int64_t w_mid = stride == 2 ? ceil_half(w) : w;
      return 2 * 7 * c_in * c_out * h * w_mid + 2 * 7 * c_out * c_out * hw_o;
    }
  }
  return 0;
}

}  // namespace

int64_t Network::count_flops() const {
  int64_t h = input_h_, w = input_w_;
  int64_t total = 2LL * 9 * in_channels_ * genome_.v0 * h * w;  // stem
  const int num_nodes = genome_.cells.num_nodes;
  for (const auto& cell : cells_) {
    const auto& geno = cell.reduction ? genome_.cells.reduce : genome_.cells.normal;
    for (size_t e = 0; e < cell.ops.size(); ++e) {
      const int stride = cell.ops[e].stride;
      // Edges from already-reduced intermediates see the halved size.
      const int64_t eh = (cell.reduction && geno[e].src >= 2) ? ceil_half(h) : h;
      const int64_t ew = (cell.reduction && geno[e].src >= 2) ? ceil_half(w) : w;
      total += op_flops(cell.ops[e].kind, cell.channels, cell.channels, eh, ew, stride);
    }
    if (cell.reduction) {
      h = ceil_half(h);
      w = ceil_half(w);
    }
  }
  total += 2LL * cell_output_channels(num_nodes, cells_.back().channels) * num_classes_;
  return total;
}

}  // namespace egdarts
