#pragma once

#include <vector>

#include "egdarts/tensor.hpp"

namespace egdarts {

// Elementwise / reduction primitives.
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& x, double c);
TensorPtr add_n(const std::vector<TensorPtr>& xs);
TensorPtr sum_all(const TensorPtr& x);
TensorPtr mean_all(const TensorPtr& x);
TensorPtr relu(const TensorPtr& x);
TensorPtr sigmoid(const TensorPtr& x);
TensorPtr reshape(const TensorPtr& x, std::vector<int64_t> new_shape);

/// 1-D softmax (max-shifted); weights sum to 1 within 1e-12.
TensorPtr softmax_vec(const TensorPtr& x);

/// out = sum_i w[i] * xs[i], differentiable in both the inputs and the weight
/// vector. This is the fused form of a softmax-relaxed mixed edge.
TensorPtr weighted_sum(const std::vector<TensorPtr>& xs, const TensorPtr& w);

// NCHW kernels. All tensors are (N, C, H, W) unless stated otherwise.
struct Conv2dSpec {
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;
  int dil_h = 1;
  int dil_w = 1;
  int groups = 1;
};

/// weight is (C_out, C_in/groups, kH, kW); no bias (the norm layers absorb it).
TensorPtr conv2d(const TensorPtr& input, const TensorPtr& weight, const Conv2dSpec& spec);

/// Square stride/dilation convenience with "same" padding for the effective
/// kernel, so stride-1 convs preserve H and W exactly.
TensorPtr conv2d_same(const TensorPtr& input, const TensorPtr& weight, int stride,
                      int dilation = 1, int groups = 1);

TensorPtr max_pool3x3(const TensorPtr& x, int stride);  // same padding
TensorPtr avg_pool3x3(const TensorPtr& x, int stride);  // same padding, pad-exclusive counts
TensorPtr global_avg_pool(const TensorPtr& x);          // (N,C,H,W) -> (N,C)

/// Affine-free per-channel batch statistics normalization (fixed epsilon).
TensorPtr batch_norm(const TensorPtr& x, double eps = 1e-5);

/// x: (N,C), w: (K,C), b: (K) -> (N,K)
TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b);

/// gate: (N,C); out[n,c,h,w] = x[n,c,h,w] * gate[n,c]
TensorPtr channel_scale(const TensorPtr& x, const TensorPtr& gate);

/// Parameter-free spatial halving: keeps every other row/column.
TensorPtr subsample2(const TensorPtr& x);

/// Parameter-free channel adapter: cyclic tiling when widening, modulo-group
/// averaging when narrowing, identity when equal.
TensorPtr adapt_channels(const TensorPtr& x, int64_t c_out);

TensorPtr concat_channels(const std::vector<TensorPtr>& xs);

/// Mean over the batch of -log softmax(logits)[label]; logits (N,C).
TensorPtr cross_entropy(const TensorPtr& logits, const std::vector<int>& labels);

int64_t conv_out_size(int64_t in, int64_t kernel, int64_t stride, int64_t pad, int64_t dilation);
int64_t same_pad(int64_t kernel, int64_t dilation);

}  // namespace egdarts
