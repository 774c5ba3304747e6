#include "egdarts/block_search.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <numeric>

#include "egdarts/error.hpp"
#include "egdarts/ops.hpp"
#include "egdarts/optim.hpp"
#include "egdarts/util.hpp"

namespace egdarts {

std::optional<ComplexityFit> fit_theta1(const std::vector<std::pair<double, double>>& history) {
  const size_t m = history.size();
  if (m < 2) return std::nullopt;
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (const auto& [x, y] : history) {
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double denom = static_cast<double>(m) * sxx - sx * sx;
  bool all_same = true;
  for (const auto& [x, y] : history) all_same = all_same && (x == history[0].first);
  if (all_same || denom == 0.0) return std::nullopt;
  ComplexityFit fit;
  fit.theta1 = (static_cast<double>(m) * sxy - sx * sy) / denom;
  fit.theta0 = sy / static_cast<double>(m) - fit.theta1 * sx / static_cast<double>(m);
  return fit;
}

std::optional<double> grad_theta(const std::vector<std::pair<double, double>>& history) {
  if (history.size() < 2) return std::nullopt;
  const auto& [x1, y1] = history[history.size() - 2];
  const auto& [x2, y2] = history[history.size() - 1];
  if (std::fabs(y2 - y1) < 1e-12) return std::nullopt;
  return (x2 - x1) / (y2 - y1);
}

int sigma(double grad_theta, double theta1) {
  return (grad_theta > theta1 || grad_theta > 0.0) ? 1 : 0;
}

double phi(double grad_theta, double theta1, double phi_cap) {
  if (theta1 == 0.0) return 0.0;
  const double raw = sigma(grad_theta, theta1) * std::fabs(grad_theta) / theta1;
  return std::clamp(raw, 0.0, phi_cap);
}

namespace {

std::vector<std::vector<double>> copy_grads(const std::vector<TensorPtr>& ts) {
  std::vector<std::vector<double>> out;
  out.reserve(ts.size());
  for (const auto& t : ts) out.push_back(t->ensure_grad());
  return out;
}

void check_finite_loss(const TensorPtr& loss, const char* which) {
  if (!std::isfinite(loss->data[0]))
    throw NumericError(std::string("arch step: non-finite ") + which + " loss " +
                       std::to_string(loss->data[0]));
}

}  // namespace

ArchGradient arch_gradient(BilevelProblem& pb, ArchGradMode mode, double xi,
                           double epsilon_override) {
  const auto& ws = pb.weight_params();
  const auto& as = pb.alpha_params();
  ArchGradient out;

  if (mode == ArchGradMode::first_order) {
    zero_grad(as);
    auto lv = pb.val_loss();
    check_finite_loss(lv, "validation");
    backward(lv);
    out.val_loss = lv->data[0];
    out.grads = copy_grads(as);
    return out;
  }

  // d/dw of the training loss at the current weights.
  zero_grad(ws);
  auto lt = pb.train_loss();
  check_finite_loss(lt, "training");
  backward(lt);
  const auto gw_train = copy_grads(ws);

  std::vector<std::vector<double>> w_orig;
  w_orig.reserve(ws.size());
  for (const auto& w : ws) w_orig.push_back(w->data);

  // Virtual step w' = w - xi * grad, then the validation gradient there.
  for (size_t i = 0; i < ws.size(); ++i)
    for (size_t j = 0; j < ws[i]->data.size(); ++j) ws[i]->data[j] -= xi * gw_train[i][j];
  zero_grad(ws);
  zero_grad(as);
  auto lv = pb.val_loss();
  check_finite_loss(lv, "validation");
  backward(lv);
  out.val_loss = lv->data[0];
  auto g_alpha = copy_grads(as);
  const auto gw_val = copy_grads(ws);

  double norm_sq = 0.0;
  for (const auto& g : gw_val)
    for (double v : g) norm_sq += v * v;
  const double norm = std::sqrt(norm_sq);

  const auto restore = [&] {
    for (size_t i = 0; i < ws.size(); ++i) ws[i]->data = w_orig[i];
  };

  if (norm == 0.0 && epsilon_override <= 0.0) {
    // Flat validation loss in w: the curvature term vanishes.
    restore();
    out.grads = std::move(g_alpha);
    return out;
  }
  const double eps = epsilon_override > 0.0 ? epsilon_override : 0.01 / norm;

  const auto probe = [&](double sign) {
    for (size_t i = 0; i < ws.size(); ++i)
      for (size_t j = 0; j < ws[i]->data.size(); ++j)
        ws[i]->data[j] = w_orig[i][j] + sign * eps * gw_val[i][j];
    zero_grad(as);
    auto l = pb.train_loss();
    check_finite_loss(l, "training");
    backward(l);
    return copy_grads(as);
  };
  const auto g_plus = probe(1.0);
  const auto g_minus = probe(-1.0);
  restore();

  const double h = xi / (2.0 * eps);
  for (size_t i = 0; i < g_alpha.size(); ++i)
    for (size_t j = 0; j < g_alpha[i].size(); ++j)
      g_alpha[i][j] -= h * (g_plus[i][j] - g_minus[i][j]);
  out.grads = std::move(g_alpha);
  return out;
}

void validate_block_search_config(const BlockSearchConfig& cfg) {
  if (cfg.stages.empty()) throw ConfigError("block_search.stages: must not be empty");
  int prev = kNumCandidateOps;
  for (size_t s = 0; s < cfg.stages.size(); ++s) {
    const auto& st = cfg.stages[s];
    if (st.depth < 1)
      throw ConfigError("block_search.stages[" + std::to_string(s) + "].depth: must be >= 1");
    if (st.ops_after < 1 || st.ops_after >= prev)
      throw ConfigError("block_search.stages[" + std::to_string(s) +
                        "].ops_after: must strictly decrease from " + std::to_string(prev) +
                        ", got " + std::to_string(st.ops_after));
    prev = st.ops_after;
  }
  if (cfg.epochs_per_stage < 1) throw ConfigError("block_search.epochs_per_stage: must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("block_search.batch_size: must be >= 1");
  if (cfg.weight_lr <= 0) throw ConfigError("block_search.weight_lr: must be > 0");
  if (cfg.arch_lr <= 0) throw ConfigError("block_search.arch_lr: must be > 0");
  if (cfg.inner_lr <= 0) throw ConfigError("block_search.inner_lr: must be > 0");
  if (cfg.history_window < 2) throw ConfigError("block_search.history_window: must be >= 2");
  if (cfg.phi_cap < 0) throw ConfigError("block_search.phi_cap: must be >= 0");
  if (cfg.warmup_steps < 0) throw ConfigError("block_search.warmup_steps: must be >= 0");
  if (cfg.num_nodes < 4) throw ConfigError("block_search.num_nodes: must be >= 4");
  if (cfg.stem_channels < 1) throw ConfigError("block_search.stem_channels: must be >= 1");
  if (cfg.weight_fraction <= 0 || cfg.weight_fraction >= 1)
    throw ConfigError("block_search.weight_fraction: must be in (0, 1)");
}

namespace {

class SupernetBilevel final : public BilevelProblem {
 public:
  explicit SupernetBilevel(Supernet& net)
      : net_(net), weights_(net.weights()), alphas_(net.alphas()) {}

  void set_train(TensorPtr images, std::vector<int> labels) {
    train_images_ = std::move(images);
    train_labels_ = std::move(labels);
  }
  void set_val(TensorPtr images, std::vector<int> labels) {
    val_images_ = std::move(images);
    val_labels_ = std::move(labels);
  }

  const std::vector<TensorPtr>& weight_params() override { return weights_; }
  const std::vector<TensorPtr>& alpha_params() override { return alphas_; }
  TensorPtr train_loss() override {
    return cross_entropy(net_.forward(train_images_), train_labels_);
  }
  TensorPtr val_loss() override { return cross_entropy(net_.forward(val_images_), val_labels_); }

 private:
  Supernet& net_;
  std::vector<TensorPtr> weights_;
  std::vector<TensorPtr> alphas_;
  TensorPtr train_images_, val_images_;
  std::vector<int> train_labels_, val_labels_;
};

double supernet_accuracy(Supernet& net, const Dataset& ds, const std::vector<int>& indices,
                         int batch) {
  int64_t correct = 0;
  for (size_t off = 0; off < indices.size(); off += static_cast<size_t>(batch)) {
    const size_t hi = std::min(indices.size(), off + static_cast<size_t>(batch));
    std::vector<int> chunk(indices.begin() + static_cast<std::ptrdiff_t>(off),
                           indices.begin() + static_cast<std::ptrdiff_t>(hi));
    auto logits = net.forward(batch_images(ds, chunk));
    const auto labels = batch_labels(ds, chunk);
    const int64_t classes = logits->shape[1];
    for (size_t r = 0; r < chunk.size(); ++r) {
      const double* row = logits->data.data() + static_cast<int64_t>(r) * classes;
      int64_t best = 0;
      for (int64_t c = 1; c < classes; ++c)
        if (row[c] > row[best]) best = c;
      if (best == labels[r]) ++correct;
    }
  }
  return indices.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(indices.size());
}

}  // namespace

std::string trace_to_csv(const std::vector<ArchStepRecord>& trace) {
  std::string out = "step,x_k,y_k,theta1,grad_theta,sigma,phi\n";
  char buf[256];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g,%d,%.17g\n",
                  static_cast<long long>(r.step), r.x, r.y, r.theta1, r.grad_theta, r.sigma,
                  r.phi);
    out += buf;
  }
  return out;
}

BlockSearchResult progressive_search(const Dataset& ds, const BlockSearchConfig& cfg) {
  validate_block_search_config(cfg);
  if (ds.size() < 4) throw DataError("progressive_search: dataset too small");

  ArchParams arch = init_arch_params(cfg.num_nodes, cfg.seed);
  SplitSpec split_spec{cfg.weight_fraction, derive_seed(cfg.seed, "split")};
  const auto [weight_idx, alpha_idx] = split_indices(ds, split_spec);

  BlockSearchResult result;
  int64_t global_step = 0;
  int active = kNumCandidateOps;

  for (size_t s = 0; s < cfg.stages.size(); ++s) {
    const auto& stage = cfg.stages[s];
    SupernetConfig scfg;
    scfg.depth = stage.depth;
    scfg.num_nodes = cfg.num_nodes;
    scfg.stem_channels = cfg.stem_channels;
    scfg.num_classes = ds.num_classes;
    scfg.in_channels = ds.channels;
    scfg.seed = derive_seed(cfg.seed, "stage_weights", s);
    Supernet net(scfg, arch);

    SGD wopt(net.weights(), cfg.weight_lr, cfg.weight_momentum, cfg.weight_decay);
    SupernetBilevel problem(net);

    std::deque<std::pair<double, double>> history;
    int steps_in_stage = 0;
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, "shuffle", s));
    std::mt19937_64 augment_rng(derive_seed(cfg.seed, "augment", s));

    const int batch = std::min<int>(cfg.batch_size, static_cast<int>(weight_idx.size()));
    const int train_batches = static_cast<int>(weight_idx.size()) / batch;
    const int val_batches =
        std::max<int>(1, static_cast<int>(alpha_idx.size()) / std::min<int>(batch, static_cast<int>(alpha_idx.size())));
    const int val_batch = std::min<int>(batch, static_cast<int>(alpha_idx.size()));

    for (int epoch = 0; epoch < cfg.epochs_per_stage; ++epoch) {
      wopt.set_lr(cosine_lr(epoch, cfg.epochs_per_stage, cfg.weight_lr));
      std::vector<int> train_order = weight_idx;
      std::vector<int> val_order = alpha_idx;
      std::shuffle(train_order.begin(), train_order.end(), shuffle_rng);
      std::shuffle(val_order.begin(), val_order.end(), shuffle_rng);

      for (int b = 0; b < train_batches; ++b) {
        std::vector<int> tb(train_order.begin() + static_cast<std::ptrdiff_t>(b) * batch,
                            train_order.begin() + static_cast<std::ptrdiff_t>(b + 1) * batch);
        const int vb = b % val_batches;
        std::vector<int> vbidx(
            val_order.begin() + static_cast<std::ptrdiff_t>(vb) * val_batch,
            val_order.begin() + static_cast<std::ptrdiff_t>(vb) * val_batch + val_batch);

        // Weight step on the training half.
        auto train_images = batch_images(ds, tb);
        if (cfg.augment) augment_batch(*train_images, augment_rng);
        problem.set_train(train_images, batch_labels(ds, tb));
        problem.set_val(batch_images(ds, vbidx), batch_labels(ds, vbidx));
        wopt.zero_grad();
        auto loss = problem.train_loss();
        check_finite_loss(loss, "training");
        backward(loss);
        wopt.step();

        // Architecture step on the validation half.
        const double x = net.expected_complexity();
        auto ag = arch_gradient(problem, cfg.mode, cfg.inner_lr);
        history.emplace_back(x, ag.val_loss);
        while (static_cast<int>(history.size()) > cfg.history_window) history.pop_front();

        const std::vector<std::pair<double, double>> window(history.begin(), history.end());
        const auto fit = fit_theta1(window);
        const auto gt = grad_theta(window);
        const int sig = (fit && gt) ? sigma(*gt, fit->theta1) : 0;
        const double raw_phi = (fit && gt) ? phi(*gt, fit->theta1, cfg.phi_cap) : 0.0;
        const double applied =
            (cfg.enhancement && steps_in_stage >= cfg.warmup_steps) ? raw_phi : 0.0;

        ArchStepRecord rec;
        rec.step = global_step;
        rec.x = x;
        rec.y = ag.val_loss;
        rec.theta1 = fit ? fit->theta1 : 0.0;
        rec.grad_theta = gt ? *gt : 0.0;
        rec.sigma = sig;
        rec.phi = applied;
        result.trace.push_back(rec);

        const double factor = 1.0 + applied;
        auto alphas = net.alphas();
        for (size_t i = 0; i < alphas.size(); ++i)
          for (size_t j = 0; j < alphas[i]->data.size(); ++j)
            alphas[i]->data[j] -= cfg.arch_lr * factor * ag.grads[i][j];

        ++steps_in_stage;
        ++global_step;
      }
    }

    if (s + 1 == cfg.stages.size()) {
      result.final_val_accuracy = supernet_accuracy(net, ds, alpha_idx, batch);
      if (stage.ops_after < active) {
        prune_ops(arch, active - stage.ops_after);
        active = stage.ops_after;
      }
      result.genotype = derive_genotype(arch);
      result.derived_param_count = net.genotype_param_count(result.genotype);
    } else if (stage.ops_after < active) {
      prune_ops(arch, active - stage.ops_after);
      active = stage.ops_after;
    }
  }

  result.arch = std::move(arch);
  return result;
}

}  // namespace egdarts
