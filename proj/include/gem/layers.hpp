#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gem/param_store.hpp"
#include "gem/spatial.hpp"
#include "gem/tensor.hpp"

namespace gem {

// Init gain for weight matrices: sqrt(6)/sqrt(fan_in) uniform bounds keep
// activation variance stable through relu stacks without normalization.
constexpr double kWeightGain = 2.449489742783178;  // sqrt(6)

struct Linear {
  Tensor w;  // [in x out]
  Tensor b;  // [out]
  bool has_bias = true;

  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, bool bias = true)
      : has_bias(bias) {
    w = ps.add_uniform(name + ".w", {in, out}, in, rng, kWeightGain);
    if (bias) b = ps.add_uniform(name + ".b", {out}, in, rng);
  }

  Tensor operator()(const Tensor& x) const {
    if (x.rank() == 1) {
      Tensor y = (*this)(reshape(x, {1, x.dim(0)}));
      return reshape(y, {y.dim(1)});
    }
    Tensor y = matmul(x, w);
    return has_bias ? add(y, b) : y;
  }
};

struct Conv2dLayer {
  Tensor w;  // [out x in x k x k]
  Tensor b;  // [out]
  int stride = 1;
  int pad = 0;
  bool floor_mode = false;  // stride-2 stages use floor output extents

  Conv2dLayer() = default;
  Conv2dLayer(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int k, int stride,
              int pad, Rng& rng, bool floor_mode = false)
      : stride(stride), pad(pad), floor_mode(floor_mode) {
    w = ps.add_uniform(name + ".w", {out_ch, in_ch, k, k}, in_ch * k * k, rng, kWeightGain);
    b = ps.add_uniform(name + ".b", {out_ch}, in_ch * k * k, rng);
  }

  Tensor operator()(const Tensor& x) const {
    Tensor y = floor_mode ? conv2d_floor(x, w, stride, pad) : conv2d(x, w, stride, pad);
    return add(y, reshape(b, {b.dim(0), 1, 1}));
  }
};

// Normalizes the last axis; learnable gain and shift.
struct LayerNorm {
  Tensor gamma, beta;
  double eps = 1e-5;

  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, int dim) {
    gamma = ps.add_constant(name + ".gamma", {dim}, 1.0);
    beta = ps.add_constant(name + ".beta", {dim}, 0.0);
  }

  Tensor operator()(const Tensor& x) const { return layer_norm_rows(x, gamma, beta, eps); }
};

struct FeedForward {
  Linear fc1, fc2;

  FeedForward() = default;
  FeedForward(ParamStore& ps, const std::string& name, int dim, int hidden, Rng& rng)
      : fc1(ps, name + ".fc1", dim, hidden, rng), fc2(ps, name + ".fc2", hidden, dim, rng) {}

  Tensor operator()(const Tensor& x) const { return fc2(relu(fc1(x))); }
};

// Scaled dot-product attention over full token sets.
struct MultiHeadAttention {
  int heads = 0;
  int dim = 0;
  Linear wq, wk, wv, wo;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& ps, const std::string& name, int dim, int kv_dim, int heads,
                     Rng& rng)
      : heads(heads), dim(dim) {
    if (dim % heads)
      shape_error("MultiHeadAttention",
                  "width " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                      " heads");
    wq = Linear(ps, name + ".wq", dim, dim, rng);
    wk = Linear(ps, name + ".wk", kv_dim, dim, rng);
    wv = Linear(ps, name + ".wv", kv_dim, dim, rng);
    wo = Linear(ps, name + ".wo", dim, dim, rng);
  }

  struct Detail {
    std::vector<Tensor> attn;  // per-head row-stochastic [S x T]
    Tensor out;                // [S x dim]
  };

  Detail forward_detail(const Tensor& q_in, const Tensor& kv_in) const {
    const int dh = dim / heads;
    const Tensor q = wq(q_in);
    const Tensor k = wk(kv_in);
    const Tensor v = wv(kv_in);
    Detail d;
    std::vector<Tensor> heads_out;
    for (int h = 0; h < heads; ++h) {
      const Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
      const Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
      const Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
      const Tensor scores = mul_scalar(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(dh)));
      const Tensor attn = softmax(scores, 1);
      d.attn.push_back(attn);
      heads_out.push_back(matmul(attn, vh));
    }
    d.out = wo(concat(heads_out, 1));
    return d;
  }

  Tensor operator()(const Tensor& q_in, const Tensor& kv_in) const {
    return forward_detail(q_in, kv_in).out;
  }
};

}  // namespace gem
