#include "egdarts/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "egdarts/error.hpp"

namespace egdarts {

namespace {

void check_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
  if (a->shape != b->shape)
    throw ShapeError(std::string(op) + ": operand shapes differ (" + std::to_string(a->size()) +
                     " vs " + std::to_string(b->size()) + " elements)");
}

void check_rank(const TensorPtr& t, size_t rank, const char* op) {
  if (t->shape.size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got rank " +
                     std::to_string(t->shape.size()));
}

}  // namespace

int64_t conv_out_size(int64_t in, int64_t kernel, int64_t stride, int64_t pad, int64_t dilation) {
  return (in + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1;
}

int64_t same_pad(int64_t kernel, int64_t dilation) { return dilation * (kernel - 1) / 2; }

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(a, b, "add");
  auto out = make_node(a->shape, {a, b}, "add");
  for (int64_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] + b->data[i];
  out->backward_fn = [](Tensor& self) {
    for (int k = 0; k < 2; ++k) {
      auto& p = self.parents[k];
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  };
  return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(a, b, "sub");
  auto out = make_node(a->shape, {a, b}, "sub");
  for (int64_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] - b->data[i];
  out->backward_fn = [](Tensor& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  };
  return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(a, b, "mul");
  auto out = make_node(a->shape, {a, b}, "mul");
  for (int64_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * b->data[i];
  out->backward_fn = [](Tensor& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    if (a->requires_grad) {
      auto& g = a->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b->data[i];
    }
    if (b->requires_grad) {
      auto& g = b->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a->data[i];
    }
  };
  return out;
}

TensorPtr scale(const TensorPtr& x, double c) {
  auto out = make_node(x->shape, {x}, "scale");
  for (int64_t i = 0; i < out->size(); ++i) out->data[i] = x->data[i] * c;
  out->backward_fn = [c](Tensor& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    auto& g = p->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
  };
  return out;
}

TensorPtr add_n(const std::vector<TensorPtr>& xs) {
  if (xs.empty()) throw ShapeError("add_n: empty operand list");
  for (const auto& x : xs) check_same_shape(xs[0], x, "add_n");
  auto out = make_node(xs[0]->shape, xs, "add_n");
  for (const auto& x : xs)
    for (int64_t i = 0; i < out->size(); ++i) out->data[i] += x->data[i];
  out->backward_fn = [](Tensor& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  };
  return out;
}

TensorPtr sum_all(const TensorPtr& x) {
  auto out = make_node({1}, {x}, "sum");
  double s = 0.0;
  for (double v : x->data) s += v;
  out->data[0] = s;
  out->backward_fn = [](Tensor& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    auto& g = p->ensure_grad();
    const double gs = self.grad[0];
    for (double& v : g) v += gs;
  };
  return out;
}

TensorPtr mean_all(const TensorPtr& x) {
  auto out = make_node({1}, {x}, "mean");
  double s = 0.0;
  for (double v : x->data) s += v;
  const double inv = 1.0 / static_cast<double>(x->size());
  out->data[0] = s * inv;
  out->backward_fn = [inv](Tensor& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    auto& g = p->ensure_grad();
    const double gs = self.grad[0] * inv;
    for (double& v : g) v += gs;
  };
  return out;
}

TensorPtr relu(const TensorPtr& x) {
  auto out = make_node(x->shape, {x}, "relu");
  auto& km = debug::kink_margins();
  if (km.tracking) {
    for (double v : x->data) km.relu_margin = std::min(km.relu_margin, std::fabs(v));
  }
  for (int64_t i = 0; i < out->size(); ++i) out->data[i] = x->data[i] > 0.0 ? x->data[i] : 0.0;
  out->backward_fn = [](Tensor& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    auto& g = p->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i)
      if (p->data[i] > 0.0) g[i] += self.grad[i];
  };
  return out;
}

TensorPtr sigmoid(const TensorPtr& x) {
  auto out = make_node(x->shape, {x}, "sigmoid");
  for (int64_t i = 0; i < out->size(); ++i) {
    const double v = x->data[i];
    out->data[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  out->backward_fn = [](Tensor& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    auto& g = p->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) {
      const double s = self.data[i];
      g[i] += self.grad[i] * s * (1.0 - s);
    }
  };
  return out;
}

TensorPtr reshape(const TensorPtr& x, std::vector<int64_t> new_shape) {
  if (shape_numel(new_shape) != x->size())
    throw ShapeError("reshape: element count " + std::to_string(x->size()) +
                     " does not match target shape product " +
                     std::to_string(shape_numel(new_shape)));
  auto out = make_node(std::move(new_shape), {x}, "reshape");
  out->data = x->data;
  out->backward_fn = [](Tensor& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    auto& g = p->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  };
  return out;
}

TensorPtr softmax_vec(const TensorPtr& x) {
  check_rank(x, 1, "softmax_vec");
  auto out = make_node(x->shape, {x}, "softmax");
  double mx = x->data[0];
  for (double v : x->data) mx = std::max(mx, v);
  double z = 0.0;
  for (int64_t i = 0; i < x->size(); ++i) {
    out->data[i] = std::exp(x->data[i] - mx);
    z += out->data[i];
  }
  const double inv = 1.0 / z;
  for (double& v : out->data) v *= inv;
  out->backward_fn = [](Tensor& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    auto& g = p->ensure_grad();
    double dot = 0.0;
    for (size_t i = 0; i < g.size(); ++i) dot += self.grad[i] * self.data[i];
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.data[i] * (self.grad[i] - dot);
  };
  return out;
}

TensorPtr weighted_sum(const std::vector<TensorPtr>& xs, const TensorPtr& w) {
  if (xs.empty()) throw ShapeError("weighted_sum: empty operand list");
  if (w->size() != static_cast<int64_t>(xs.size()))
    throw ShapeError("weighted_sum: weight length " + std::to_string(w->size()) +
                     " != operand count " + std::to_string(xs.size()));
  for (const auto& x : xs) check_same_shape(xs[0], x, "weighted_sum");
  std::vector<TensorPtr> parents = xs;
  parents.push_back(w);
  auto out = make_node(xs[0]->shape, std::move(parents), "weighted_sum");
  const size_t k = xs.size();
  for (size_t j = 0; j < k; ++j) {
    const double wj = w->data[j];
    const auto& xd = xs[j]->data;
    for (int64_t i = 0; i < out->size(); ++i) out->data[i] += wj * xd[i];
  }
  out->backward_fn = [k](Tensor& self) {
    auto& w = self.parents[k];
    for (size_t j = 0; j < k; ++j) {
      auto& x = self.parents[j];
      if (x->requires_grad) {
        auto& g = x->ensure_grad();
        const double wj = w->data[j];
        for (size_t i = 0; i < g.size(); ++i) g[i] += wj * self.grad[i];
      }
      if (w->requires_grad) {
        double dot = 0.0;
        for (size_t i = 0; i < x->data.size(); ++i) dot += self.grad[i] * x->data[i];
        w->ensure_grad()[j] += dot;
      }
    }
  };
  return out;
}

TensorPtr conv2d(const TensorPtr& input, const TensorPtr& weight, const Conv2dSpec& spec) {
  check_rank(input, 4, "conv2d input");
  check_rank(weight, 4, "conv2d weight");
  const int64_t n_batch = input->shape[0], c_in = input->shape[1];
  const int64_t h_in = input->shape[2], w_in = input->shape[3];
  const int64_t c_out = weight->shape[0], c_grp = weight->shape[1];
  const int64_t k_h = weight->shape[2], k_w = weight->shape[3];
  const int64_t groups = spec.groups;

  if (groups < 1 || c_in % groups != 0)
    throw ShapeError("conv2d: input channels " + std::to_string(c_in) +
                     " not divisible by groups " + std::to_string(groups));
  if (c_grp != c_in / groups)
    throw ShapeError("conv2d: weight dim 1 is " + std::to_string(c_grp) + ", expected C_in/groups=" +
                     std::to_string(c_in / groups));
  if (c_out % groups != 0)
    throw ShapeError("conv2d: output channels " + std::to_string(c_out) +
                     " not divisible by groups " + std::to_string(groups));

  const int64_t h_out = conv_out_size(h_in, k_h, spec.stride_h, spec.pad_h, spec.dil_h);
  const int64_t w_out = conv_out_size(w_in, k_w, spec.stride_w, spec.pad_w, spec.dil_w);
  if (h_out <= 0 || w_out <= 0)
    throw ShapeError("conv2d: output spatial size " + std::to_string(h_out) + "x" +
                     std::to_string(w_out) + " is not positive (input " + std::to_string(h_in) +
                     "x" + std::to_string(w_in) + ")");

  auto out = make_node({n_batch, c_out, h_out, w_out}, {input, weight}, "conv2d");

  const int64_t co_per_g = c_out / groups;
  const int64_t sh = spec.stride_h, sw = spec.stride_w;
  const int64_t ph = spec.pad_h, pw = spec.pad_w;
  const int64_t dh = spec.dil_h, dw = spec.dil_w;

  // Valid output-column range for a given kernel column offset. Captured by
  // value: the backward closure outlives this stack frame.
  const auto col_range = [dw, pw, sw, w_in, w_out](int64_t kx, int64_t& lo, int64_t& hi) {
    const int64_t off = kx * dw - pw;  // iw = ow*sw + off
    lo = off >= 0 ? 0 : (-off + sw - 1) / sw;
    const int64_t top = w_in - 1 - off;
    hi = top < 0 ? -1 : std::min(w_out - 1, top / sw);
  };
  const auto row_valid = [sh, ph, dh, h_in](int64_t oh, int64_t ky, int64_t& ih) {
    ih = oh * sh - ph + ky * dh;
    return ih >= 0 && ih < h_in;
  };

  const double* in_d = input->data.data();
  const double* w_d = weight->data.data();
  double* out_d = out->data.data();

  for (int64_t n = 0; n < n_batch; ++n) {
    for (int64_t g = 0; g < groups; ++g) {
      for (int64_t co = g * co_per_g; co < (g + 1) * co_per_g; ++co) {
        double* op = out_d + ((n * c_out + co) * h_out) * w_out;
        for (int64_t cg = 0; cg < c_grp; ++cg) {
          const int64_t ci = g * c_grp + cg;
          const double* ip = in_d + ((n * c_in + ci) * h_in) * w_in;
          const double* wp = w_d + ((co * c_grp + cg) * k_h) * k_w;
          for (int64_t ky = 0; ky < k_h; ++ky) {
            for (int64_t kx = 0; kx < k_w; ++kx) {
              const double wv = wp[ky * k_w + kx];
              if (wv == 0.0) continue;
              int64_t lo, hi;
              col_range(kx, lo, hi);
              if (hi < lo) continue;
              const int64_t off = kx * dw - pw;
              for (int64_t oh = 0; oh < h_out; ++oh) {
                int64_t ih;
                if (!row_valid(oh, ky, ih)) continue;
                const double* irow = ip + ih * w_in + off;
                double* orow = op + oh * w_out;
                if (sw == 1) {
                  for (int64_t ow = lo; ow <= hi; ++ow) orow[ow] += wv * irow[ow];
                } else {
                  for (int64_t ow = lo; ow <= hi; ++ow) orow[ow] += wv * irow[ow * sw];
                }
              }
            }
          }
        }
      }
    }
  }

  out->backward_fn = [spec, n_batch, c_in, h_in, w_in, c_out, c_grp, k_h, k_w, groups, h_out,
                      w_out, co_per_g, col_range, row_valid](Tensor& self) {
    auto& input = self.parents[0];
    auto& weight = self.parents[1];
    const double* g_d = self.grad.data();
    const double* in_d = input->data.data();
    const double* w_d = weight->data.data();
    const int64_t sw = spec.stride_w;
    double* gin = input->requires_grad ? input->ensure_grad().data() : nullptr;
    double* gw = weight->requires_grad ? weight->ensure_grad().data() : nullptr;

    for (int64_t n = 0; n < n_batch; ++n) {
      for (int64_t g = 0; g < groups; ++g) {
        for (int64_t co = g * co_per_g; co < (g + 1) * co_per_g; ++co) {
          const double* gp = g_d + ((n * c_out + co) * h_out) * w_out;
          for (int64_t cg = 0; cg < c_grp; ++cg) {
            const int64_t ci = g * c_grp + cg;
            const double* ip = in_d + ((n * c_in + ci) * h_in) * w_in;
            double* gip = gin ? gin + ((n * c_in + ci) * h_in) * w_in : nullptr;
            const double* wp = w_d + ((co * c_grp + cg) * k_h) * k_w;
            double* gwp = gw ? gw + ((co * c_grp + cg) * k_h) * k_w : nullptr;
            for (int64_t ky = 0; ky < k_h; ++ky) {
              for (int64_t kx = 0; kx < k_w; ++kx) {
                int64_t lo, hi;
                col_range(kx, lo, hi);
                if (hi < lo) continue;
                const int64_t off = kx * spec.dil_w - spec.pad_w;
                const double wv = wp[ky * k_w + kx];
                double wacc = 0.0;
                for (int64_t oh = 0; oh < h_out; ++oh) {
                  int64_t ih;
                  if (!row_valid(oh, ky, ih)) continue;
                  const double* grow = gp + oh * w_out;
                  const double* irow = ip + ih * w_in + off;
                  if (gip) {
                    double* girow = gip + ih * w_in + off;
                    if (sw == 1) {
                      for (int64_t ow = lo; ow <= hi; ++ow) girow[ow] += wv * grow[ow];
                    } else {
                      for (int64_t ow = lo; ow <= hi; ++ow) girow[ow * sw] += wv * grow[ow];
                    }
                  }
                  if (gwp) {
                    if (sw == 1) {
                      for (int64_t ow = lo; ow <= hi; ++ow) wacc += grow[ow] * irow[ow];
                    } else {
                      for (int64_t ow = lo; ow <= hi; ++ow) wacc += grow[ow] * irow[ow * sw];
                    }
                  }
                }
                if (gwp) gwp[ky * k_w + kx] += wacc;
              }
            }
          }
        }
      }
    }
  };
  return out;
}

TensorPtr conv2d_same(const TensorPtr& input, const TensorPtr& weight, int stride, int dilation,
                      int groups) {
  Conv2dSpec spec;
  spec.stride_h = spec.stride_w = stride;
  spec.dil_h = spec.dil_w = dilation;
  spec.groups = groups;
  spec.pad_h = static_cast<int>(same_pad(weight->shape[2], dilation));
  spec.pad_w = static_cast<int>(same_pad(weight->shape[3], dilation));
  return conv2d(input, weight, spec);
}

namespace {

template <bool kMax>
TensorPtr pool3x3_impl(const TensorPtr& x, int stride) {
  check_rank(x, 4, kMax ? "max_pool3x3" : "avg_pool3x3");
  const int64_t n_batch = x->shape[0], ch = x->shape[1], h_in = x->shape[2], w_in = x->shape[3];
  const int64_t pad = 1, k = 3;
  const int64_t h_out = conv_out_size(h_in, k, stride, pad, 1);
  const int64_t w_out = conv_out_size(w_in, k, stride, pad, 1);
  auto out = make_node({n_batch, ch, h_out, w_out}, {x}, kMax ? "max_pool" : "avg_pool");

  // For max: remember winner index per output cell. For avg: valid counts are
  // recomputed in backward from the geometry.
  std::vector<int32_t> argmax;
  if (kMax) argmax.assign(static_cast<size_t>(out->size()), 0);
  auto& km = debug::kink_margins();

  const double* in_d = x->data.data();
  double* out_d = out->data.data();
  for (int64_t n = 0; n < n_batch; ++n) {
    for (int64_t c = 0; c < ch; ++c) {
      const double* ip = in_d + ((n * ch + c) * h_in) * w_in;
      double* op = out_d + ((n * ch + c) * h_out) * w_out;
      int32_t* am = kMax ? argmax.data() + ((n * ch + c) * h_out) * w_out : nullptr;
      for (int64_t oh = 0; oh < h_out; ++oh) {
        for (int64_t ow = 0; ow < w_out; ++ow) {
          const int64_t h0 = oh * stride - pad, w0 = ow * stride - pad;
          if (kMax) {
            double best = -1e300, second = -1e300;
            int32_t best_idx = 0;
            for (int64_t dy = 0; dy < k; ++dy) {
              const int64_t ih = h0 + dy;
              if (ih < 0 || ih >= h_in) continue;
              for (int64_t dx = 0; dx < k; ++dx) {
                const int64_t iw = w0 + dx;
                if (iw < 0 || iw >= w_in) continue;
                const double v = ip[ih * w_in + iw];
                if (v > best) {
                  second = best;
                  best = v;
                  best_idx = static_cast<int32_t>(ih * w_in + iw);
                } else if (v > second) {
                  second = v;
                }
              }
            }
            if (km.tracking && second > -1e300)
              km.pool_gap = std::min(km.pool_gap, best - second);
            op[oh * w_out + ow] = best;
            am[oh * w_out + ow] = best_idx;
          } else {
            double s = 0.0;
            int64_t cnt = 0;
            for (int64_t dy = 0; dy < k; ++dy) {
              const int64_t ih = h0 + dy;
              if (ih < 0 || ih >= h_in) continue;
              for (int64_t dx = 0; dx < k; ++dx) {
                const int64_t iw = w0 + dx;
                if (iw < 0 || iw >= w_in) continue;
                s += ip[ih * w_in + iw];
                ++cnt;
              }
            }
            op[oh * w_out + ow] = s / static_cast<double>(cnt);
          }
        }
      }
    }
  }

  if (kMax) {
    out->backward_fn = [argmax = std::move(argmax), n_batch, ch, h_in, w_in, h_out,
                        w_out](Tensor& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      double* g = p->ensure_grad().data();
      for (int64_t nc = 0; nc < n_batch * ch; ++nc) {
        const double* go = self.grad.data() + nc * h_out * w_out;
        const int32_t* am = argmax.data() + nc * h_out * w_out;
        double* gi = g + nc * h_in * w_in;
        for (int64_t i = 0; i < h_out * w_out; ++i) gi[am[i]] += go[i];
      }
    };
  } else {
    const int64_t st = stride;
    out->backward_fn = [n_batch, ch, h_in, w_in, h_out, w_out, st](Tensor& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      double* g = p->ensure_grad().data();
      for (int64_t nc = 0; nc < n_batch * ch; ++nc) {
        const double* go = self.grad.data() + nc * h_out * w_out;
        double* gi = g + nc * h_in * w_in;
        for (int64_t oh = 0; oh < h_out; ++oh) {
          for (int64_t ow = 0; ow < w_out; ++ow) {
            const int64_t h0 = oh * st - 1, w0 = ow * st - 1;
            const int64_t y0 = std::max<int64_t>(0, h0), y1 = std::min(h_in, h0 + 3);
            const int64_t x0 = std::max<int64_t>(0, w0), x1 = std::min(w_in, w0 + 3);
            const double share = go[oh * w_out + ow] / static_cast<double>((y1 - y0) * (x1 - x0));
            for (int64_t ih = y0; ih < y1; ++ih)
              for (int64_t iw = x0; iw < x1; ++iw) gi[ih * w_in + iw] += share;
          }
        }
      }
    };
  }
  return out;
}

}  // namespace

TensorPtr max_pool3x3(const TensorPtr& x, int stride) { return pool3x3_impl<true>(x, stride); }
TensorPtr avg_pool3x3(const TensorPtr& x, int stride) { return pool3x3_impl<false>(x, stride); }

TensorPtr global_avg_pool(const TensorPtr& x) {
  check_rank(x, 4, "global_avg_pool");
  const int64_t n_batch = x->shape[0], ch = x->shape[1], hw = x->shape[2] * x->shape[3];
  auto out = make_node({n_batch, ch}, {x}, "gap");
  const double inv = 1.0 / static_cast<double>(hw);
  for (int64_t nc = 0; nc < n_batch * ch; ++nc) {
    const double* ip = x->data.data() + nc * hw;
    double s = 0.0;
    for (int64_t i = 0; i < hw; ++i) s += ip[i];
    out->data[nc] = s * inv;
  }
  out->backward_fn = [hw, inv](Tensor& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    double* g = p->ensure_grad().data();
    for (size_t nc = 0; nc < self.grad.size(); ++nc) {
      const double gs = self.grad[nc] * inv;
      double* gp = g + nc * hw;
      for (int64_t i = 0; i < hw; ++i) gp[i] += gs;
    }
  };
  return out;
}

TensorPtr batch_norm(const TensorPtr& x, double eps) {
  check_rank(x, 4, "batch_norm");
  const int64_t n_batch = x->shape[0], ch = x->shape[1], hw = x->shape[2] * x->shape[3];
  const int64_t m = n_batch * hw;
  auto out = make_node(x->shape, {x}, "batch_norm");

  std::vector<double> inv_sigma(static_cast<size_t>(ch));
  const double inv_m = 1.0 / static_cast<double>(m);
  for (int64_t c = 0; c < ch; ++c) {
    double mean = 0.0;
    for (int64_t n = 0; n < n_batch; ++n) {
      const double* ip = x->data.data() + ((n * ch + c) * hw);
      for (int64_t i = 0; i < hw; ++i) mean += ip[i];
    }
    mean *= inv_m;
    double var = 0.0;
    for (int64_t n = 0; n < n_batch; ++n) {
      const double* ip = x->data.data() + ((n * ch + c) * hw);
      for (int64_t i = 0; i < hw; ++i) {
        const double d = ip[i] - mean;
        var += d * d;
      }
    }
    var *= inv_m;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_sigma[static_cast<size_t>(c)] = inv;
    for (int64_t n = 0; n < n_batch; ++n) {
      const double* ip = x->data.data() + ((n * ch + c) * hw);
      double* op = out->data.data() + ((n * ch + c) * hw);
      for (int64_t i = 0; i < hw; ++i) op[i] = (ip[i] - mean) * inv;
    }
  }

  out->backward_fn = [inv_sigma = std::move(inv_sigma), n_batch, ch, hw, inv_m](Tensor& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    double* g = p->ensure_grad().data();
    // dx = inv_sigma * (dy - mean(dy) - y * mean(dy*y)), means over (N,H,W).
    for (int64_t c = 0; c < ch; ++c) {
      double mg = 0.0, mgy = 0.0;
      for (int64_t n = 0; n < n_batch; ++n) {
        const int64_t base = (n * ch + c) * hw;
        const double* gy = self.grad.data() + base;
        const double* y = self.data.data() + base;
        for (int64_t i = 0; i < hw; ++i) {
          mg += gy[i];
          mgy += gy[i] * y[i];
        }
      }
      mg *= inv_m;
      mgy *= inv_m;
      const double inv = inv_sigma[static_cast<size_t>(c)];
      for (int64_t n = 0; n < n_batch; ++n) {
        const int64_t base = (n * ch + c) * hw;
        const double* gy = self.grad.data() + base;
        const double* y = self.data.data() + base;
        double* gx = g + base;
        for (int64_t i = 0; i < hw; ++i) gx[i] += inv * (gy[i] - mg - y[i] * mgy);
      }
    }
  };
  return out;
}

TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
  check_rank(x, 2, "linear input");
  check_rank(w, 2, "linear weight");
  check_rank(b, 1, "linear bias");
  const int64_t n_batch = x->shape[0], c = x->shape[1], k = w->shape[0];
  if (w->shape[1] != c)
    throw ShapeError("linear: weight expects " + std::to_string(w->shape[1]) +
                     " input features, input gives " + std::to_string(c));
  if (b->shape[0] != k)
    throw ShapeError("linear: bias length " + std::to_string(b->shape[0]) + " != output features " +
                     std::to_string(k));
  auto out = make_node({n_batch, k}, {x, w, b}, "linear");
  for (int64_t n = 0; n < n_batch; ++n) {
    const double* xp = x->data.data() + n * c;
    double* op = out->data.data() + n * k;
    for (int64_t j = 0; j < k; ++j) {
      const double* wp = w->data.data() + j * c;
      double s = b->data[j];
      for (int64_t i = 0; i < c; ++i) s += xp[i] * wp[i];
      op[j] = s;
    }
  }
  out->backward_fn = [n_batch, c, k](Tensor& self) {
    auto& x = self.parents[0];
    auto& w = self.parents[1];
    auto& b = self.parents[2];
    for (int64_t n = 0; n < n_batch; ++n) {
      const double* go = self.grad.data() + n * k;
      if (x->requires_grad) {
        double* gx = x->ensure_grad().data() + n * c;
        for (int64_t j = 0; j < k; ++j) {
          const double gj = go[j];
          const double* wp = w->data.data() + j * c;
          for (int64_t i = 0; i < c; ++i) gx[i] += gj * wp[i];
        }
      }
      if (w->requires_grad) {
        double* gw = w->ensure_grad().data();
        const double* xp = x->data.data() + n * c;
        for (int64_t j = 0; j < k; ++j) {
          const double gj = go[j];
          double* gwp = gw + j * c;
          for (int64_t i = 0; i < c; ++i) gwp[i] += gj * xp[i];
        }
      }
      if (b->requires_grad) {
        double* gb = b->ensure_grad().data();
        for (int64_t j = 0; j < k; ++j) gb[j] += go[j];
      }
    }
  };
  return out;
}

TensorPtr channel_scale(const TensorPtr& x, const TensorPtr& gate) {
  check_rank(x, 4, "channel_scale input");
  check_rank(gate, 2, "channel_scale gate");
  const int64_t n_batch = x->shape[0], ch = x->shape[1], hw = x->shape[2] * x->shape[3];
  if (gate->shape[0] != n_batch || gate->shape[1] != ch)
    throw ShapeError("channel_scale: gate shape mismatch on batch or channel dimension");
  auto out = make_node(x->shape, {x, gate}, "channel_scale");
  for (int64_t nc = 0; nc < n_batch * ch; ++nc) {
    const double gv = gate->data[nc];
    const double* ip = x->data.data() + nc * hw;
    double* op = out->data.data() + nc * hw;
    for (int64_t i = 0; i < hw; ++i) op[i] = ip[i] * gv;
  }
  out->backward_fn = [n_batch, ch, hw](Tensor& self) {
    auto& x = self.parents[0];
    auto& gate = self.parents[1];
    for (int64_t nc = 0; nc < n_batch * ch; ++nc) {
      const double* go = self.grad.data() + nc * hw;
      if (x->requires_grad) {
        double* gx = x->ensure_grad().data() + nc * hw;
        const double gv = gate->data[nc];
        for (int64_t i = 0; i < hw; ++i) gx[i] += go[i] * gv;
      }
      if (gate->requires_grad) {
        const double* xp = x->data.data() + nc * hw;
        double s = 0.0;
        for (int64_t i = 0; i < hw; ++i) s += go[i] * xp[i];
        gate->ensure_grad()[nc] += s;
      }
    }
  };
  return out;
}

TensorPtr subsample2(const TensorPtr& x) {
  check_rank(x, 4, "subsample2");
  const int64_t n_batch = x->shape[0], ch = x->shape[1], h_in = x->shape[2], w_in = x->shape[3];
  const int64_t h_out = (h_in + 1) / 2, w_out = (w_in + 1) / 2;
  auto out = make_node({n_batch, ch, h_out, w_out}, {x}, "subsample2");
  for (int64_t nc = 0; nc < n_batch * ch; ++nc) {
    const double* ip = x->data.data() + nc * h_in * w_in;
    double* op = out->data.data() + nc * h_out * w_out;
    for (int64_t oh = 0; oh < h_out; ++oh)
      for (int64_t ow = 0; ow < w_out; ++ow) op[oh * w_out + ow] = ip[(2 * oh) * w_in + 2 * ow];
  }
  out->backward_fn = [n_batch, ch, h_in, w_in, h_out, w_out](Tensor& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    double* g = p->ensure_grad().data();
    for (int64_t nc = 0; nc < n_batch * ch; ++nc) {
      const double* go = self.grad.data() + nc * h_out * w_out;
      double* gi = g + nc * h_in * w_in;
      for (int64_t oh = 0; oh < h_out; ++oh)
        for (int64_t ow = 0; ow < w_out; ++ow) gi[(2 * oh) * w_in + 2 * ow] += go[oh * w_out + ow];
    }
  };
  return out;
}

TensorPtr adapt_channels(const TensorPtr& x, int64_t c_out) {
  check_rank(x, 4, "adapt_channels");
  const int64_t c_in = x->shape[1];
  if (c_out <= 0) throw ShapeError("adapt_channels: target channel count must be positive");
  if (c_in == c_out) return x;
  const int64_t n_batch = x->shape[0], hw = x->shape[2] * x->shape[3];
  auto out = make_node({n_batch, c_out, x->shape[2], x->shape[3]}, {x}, "adapt_channels");

  if (c_out > c_in) {
    // Widen by cyclic tiling.
    for (int64_t n = 0; n < n_batch; ++n) {
      for (int64_t co = 0; co < c_out; ++co) {
        const double* ip = x->data.data() + ((n * c_in + co % c_in) * hw);
        double* op = out->data.data() + ((n * c_out + co) * hw);
        std::memcpy(op, ip, sizeof(double) * static_cast<size_t>(hw));
      }
    }
    out->backward_fn = [n_batch, c_in, c_out, hw](Tensor& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      double* g = p->ensure_grad().data();
      for (int64_t n = 0; n < n_batch; ++n) {
        for (int64_t co = 0; co < c_out; ++co) {
          const double* go = self.grad.data() + ((n * c_out + co) * hw);
          double* gi = g + ((n * c_in + co % c_in) * hw);
          for (int64_t i = 0; i < hw; ++i) gi[i] += go[i];
        }
      }
    };
  } else {
    // Narrow by modulo-group averaging.
    std::vector<double> inv_count(static_cast<size_t>(c_out));
    for (int64_t j = 0; j < c_out; ++j) {
      const int64_t cnt = (c_in - 1 - j) / c_out + 1;
      inv_count[static_cast<size_t>(j)] = 1.0 / static_cast<double>(cnt);
    }
    for (int64_t n = 0; n < n_batch; ++n) {
      for (int64_t ci = 0; ci < c_in; ++ci) {
        const double* ip = x->data.data() + ((n * c_in + ci) * hw);
        double* op = out->data.data() + ((n * c_out + ci % c_out) * hw);
        for (int64_t i = 0; i < hw; ++i) op[i] += ip[i];
      }
      for (int64_t co = 0; co < c_out; ++co) {
        double* op = out->data.data() + ((n * c_out + co) * hw);
        const double inv = inv_count[static_cast<size_t>(co)];
        for (int64_t i = 0; i < hw; ++i) op[i] *= inv;
      }
    }
    out->backward_fn = [n_batch, c_in, c_out, hw, inv_count = std::move(inv_count)](Tensor& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      double* g = p->ensure_grad().data();
      for (int64_t n = 0; n < n_batch; ++n) {
        for (int64_t ci = 0; ci < c_in; ++ci) {
          const double* go = self.grad.data() + ((n * c_out + ci % c_out) * hw);
          double* gi = g + ((n * c_in + ci) * hw);
          const double inv = inv_count[static_cast<size_t>(ci % c_out)];
          for (int64_t i = 0; i < hw; ++i) gi[i] += go[i] * inv;
        }
      }
    };
  }
  return out;
}

TensorPtr concat_channels(const std::vector<TensorPtr>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: empty operand list");
  const int64_t n_batch = xs[0]->shape[0], h = xs[0]->shape[2], w = xs[0]->shape[3];
  int64_t c_total = 0;
  for (const auto& x : xs) {
    check_rank(x, 4, "concat_channels");
    if (x->shape[0] != n_batch || x->shape[2] != h || x->shape[3] != w)
      throw ShapeError("concat_channels: operands disagree on batch or spatial dimensions");
    c_total += x->shape[1];
  }
  auto out = make_node({n_batch, c_total, h, w}, xs, "concat_channels");
  const int64_t hw = h * w;
  for (int64_t n = 0; n < n_batch; ++n) {
    int64_t c_off = 0;
    for (const auto& x : xs) {
      const int64_t ci = x->shape[1];
      std::memcpy(out->data.data() + ((n * c_total + c_off) * hw),
                  x->data.data() + (n * ci * hw), sizeof(double) * static_cast<size_t>(ci * hw));
      c_off += ci;
    }
  }
  out->backward_fn = [n_batch, c_total, hw](Tensor& self) {
    for (int64_t n = 0; n < n_batch; ++n) {
      int64_t c_off = 0;
      for (auto& p : self.parents) {
        const int64_t ci = p->shape[1];
        if (p->requires_grad) {
          double* gi = p->ensure_grad().data() + (n * ci * hw);
          const double* go = self.grad.data() + ((n * c_total + c_off) * hw);
          for (int64_t i = 0; i < ci * hw; ++i) gi[i] += go[i];
        }
        c_off += ci;
      }
    }
  };
  return out;
}

TensorPtr cross_entropy(const TensorPtr& logits, const std::vector<int>& labels) {
  check_rank(logits, 2, "cross_entropy logits");
  const int64_t n_batch = logits->shape[0], classes = logits->shape[1];
  if (static_cast<int64_t>(labels.size()) != n_batch)
    throw ShapeError("cross_entropy: label count " + std::to_string(labels.size()) +
                     " != batch size " + std::to_string(n_batch));
  for (int64_t n = 0; n < n_batch; ++n) {
    if (labels[static_cast<size_t>(n)] < 0 || labels[static_cast<size_t>(n)] >= classes)
      throw DataError("cross_entropy: label " + std::to_string(labels[static_cast<size_t>(n)]) +
                      " at row " + std::to_string(n) + " outside [0, " + std::to_string(classes) +
                      ")");
  }
  auto out = make_node({1}, {logits}, "cross_entropy");
  std::vector<double> probs(static_cast<size_t>(n_batch * classes));
  double total = 0.0;
  for (int64_t n = 0; n < n_batch; ++n) {
    const double* lp = logits->data.data() + n * classes;
    double mx = lp[0];
    for (int64_t c = 1; c < classes; ++c) mx = std::max(mx, lp[c]);
    double z = 0.0;
    for (int64_t c = 0; c < classes; ++c) {
      const double e = std::exp(lp[c] - mx);
      probs[static_cast<size_t>(n * classes + c)] = e;
      z += e;
    }
    const double inv = 1.0 / z;
    for (int64_t c = 0; c < classes; ++c) probs[static_cast<size_t>(n * classes + c)] *= inv;
    total += std::log(z) + mx - lp[labels[static_cast<size_t>(n)]];
  }
  out->data[0] = total / static_cast<double>(n_batch);
  out->backward_fn = [probs = std::move(probs), labels, n_batch, classes](Tensor& self) {
    auto& logits = self.parents[0];
    if (!logits->requires_grad) return;
    double* g = logits->ensure_grad().data();
    const double gs = self.grad[0] / static_cast<double>(n_batch);
    for (int64_t n = 0; n < n_batch; ++n) {
      const double* pp = probs.data() + n * classes;
      double* gp = g + n * classes;
      const int lbl = labels[static_cast<size_t>(n)];
      for (int64_t c = 0; c < classes; ++c) gp[c] += gs * (pp[c] - (c == lbl ? 1.0 : 0.0));
    }
  };
  return out;
}

}  // namespace egdarts
