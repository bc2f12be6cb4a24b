#pragma once

#include <string>

#include "gem/encoders.hpp"
#include "gem/layers.hpp"
#include "gem/positional.hpp"

namespace gem {

// Fine-grained image-text alignment grid, flattened row-major to S = rows*cols
// tokens of the model width.
struct CorrelationMap {
  Tensor tokens;  // [S x d]
  int rows = 0;
  int cols = 0;
};

// Two constant channels holding the x and y cell coordinates, linearly spaced
// over [-1, 1]; a single row or column maps to 0.
inline Tensor coord_channels(int h, int w) {
  if (h < 1 || w < 1) shape_error("coord_channels", "extents must be >= 1");
  std::vector<double> v(std::size_t(2) * h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      v[std::size_t(y) * w + x] = w > 1 ? 2.0 * x / double(w - 1) - 1.0 : 0.0;
      v[std::size_t(h) * w + std::size_t(y) * w + x] = h > 1 ? 2.0 * y / double(h - 1) - 1.0 : 0.0;
    }
  return Tensor::from({2, h, w}, std::move(v));
}

// Multi-scale text-image integration ending in a CoordConv aggregation.
// "context" mode gates the 1/16 features with the global text embedding
// multiplicatively; "addition" mode is the element-wise-addition baseline.
class ContextAwareFusion {
 public:
  ContextAwareFusion() = default;
  ContextAwareFusion(ParamStore& ps, const TrainConfig& cfg, Rng& rng)
      : additive_(cfg.fusion_mode == "addition"), d_(cfg.model_dim) {
    conv_f1_ = Conv2dLayer(ps, "fuse.conv_f1", cfg.c1, cfg.c1, 1, 1, 0, rng);
    mlp1_ = Linear(ps, "fuse.mlp1", cfg.text_dim, cfg.text_dim, rng);
    mlp2_ = Linear(ps, "fuse.mlp2", cfg.text_dim, cfg.c1, rng);
    if (!additive_) {
      // start the multiplicative gate near unity so image features pass
      // through at initialization
      auto b = mlp2_.b.mutable_values();
      for (double& v : b) v += 1.0;
    }
    conv_f2_ = Conv2dLayer(ps, "fuse.conv_f2", cfg.c2 + cfg.c1, cfg.model_dim, 1, 1, 0, rng);
    conv_f3_ = Conv2dLayer(ps, "fuse.conv_f3", cfg.c3 + cfg.model_dim, cfg.model_dim, 1, 1, 0, rng);
    conv_m_ = Conv2dLayer(ps, "fuse.conv_m", cfg.model_dim + 2, cfg.model_dim, 3, 1, 1, rng);
    coords_ = coord_channels(cfg.grid, cfg.grid);
  }

  // text MLP applied to the global feature; exposed for the gating tests
  Tensor text_gate(const Tensor& g) const { return mlp2_(relu(mlp1_(g))); }

  Tensor operator()(const FeaturePyramid& p, const Tensor& g) const {
    const int h1 = p.f1.dim(1), w1 = p.f1.dim(2);
    if (p.f2.dim(1) != 2 * h1 || p.f2.dim(2) != 2 * w1 || p.f3.dim(1) != 4 * h1 ||
        p.f3.dim(2) != 4 * w1)
      shape_error("fuse_pyramid", "pyramid scales disagree: " + shape_str(p.f1.shape()) + ", " +
                                      shape_str(p.f2.shape()) + ", " + shape_str(p.f3.shape()));

    const Tensor gate = reshape(text_gate(g), {p.f1.dim(0), 1, 1});
    const Tensor mixed = additive_ ? add(conv_f1_(p.f1), gate) : mul(conv_f1_(p.f1), gate);
    const Tensor fused1 = upsample2x(mixed);                                  // 1/8
    const Tensor fused2 = upsample2x(conv_f2_(concat({p.f2, fused1}, 0)));    // 1/4
    const Tensor fused3 = avgpool2x(conv_f3_(concat({p.f3, fused2}, 0)));     // 1/8
    const Tensor coords = coords_.defined() && coords_.dim(1) == 2 * h1 && coords_.dim(2) == 2 * w1
                              ? coords_
                              : coord_channels(2 * h1, 2 * w1);
    return conv_m_(concat({fused3, coords}, 0));
  }

 private:
  bool additive_ = false;
  int d_ = 0;
  Conv2dLayer conv_f1_, conv_f2_, conv_f3_, conv_m_;
  Linear mlp1_, mlp2_;
  Tensor coords_;
};

// Row-major flattening of the fused map plus the fixed 2-D position
// embedding. Callers on the hot path pass a precomputed embedding.
inline CorrelationMap flatten_with_pe(const Tensor& fm, const Tensor& pe) {
  const int d = fm.dim(0), rows = fm.dim(1), cols = fm.dim(2);
  CorrelationMap h;
  h.rows = rows;
  h.cols = cols;
  h.tokens = add(transpose(reshape(fm, {d, rows * cols})), pe);
  return h;
}

inline CorrelationMap flatten_with_pe(const Tensor& fm) {
  return flatten_with_pe(fm, sinusoidal_pe_2d(fm.dim(1), fm.dim(2), fm.dim(0)));
}

// Self-attention over image tokens, cross-attention into the text tokens, and
// a feed-forward sublayer; pre-residual layer norm on each.
class CorrelationAttention {
 public:
  CorrelationAttention() = default;
  CorrelationAttention(ParamStore& ps, const TrainConfig& cfg, Rng& rng)
      : text_dim_(cfg.text_dim) {
    ln1_ = LayerNorm(ps, "attn.ln1", cfg.model_dim);
    ln2_ = LayerNorm(ps, "attn.ln2", cfg.model_dim);
    ln3_ = LayerNorm(ps, "attn.ln3", cfg.model_dim);
    sa_ = MultiHeadAttention(ps, "attn.sa", cfg.model_dim, cfg.model_dim, cfg.heads, rng);
    ca_ = MultiHeadAttention(ps, "attn.ca", cfg.model_dim, cfg.text_dim, cfg.heads, rng);
    ffn_ = FeedForward(ps, "attn.ffn", cfg.model_dim, 4 * cfg.model_dim, rng);
    pe_image_ = sinusoidal_pe_2d(cfg.grid, cfg.grid, cfg.model_dim);
    pe_text_ = sinusoidal_pe_1d(cfg.token_count, cfg.text_dim);
  }

  CorrelationMap operator()(const Tensor& fm, const Tensor& local) const {
    CorrelationMap h = flatten_with_pe(fm, image_pe(fm.dim(1), fm.dim(2), fm.dim(0)));
    const Tensor kv = add(local, text_pe(local.dim(0)));
    Tensor x = h.tokens;
    const Tensor x1 = ln1_(x);
    x = add(x, sa_(x1, x1));
    x = add(x, ca_(ln2_(x), kv));
    x = add(x, ffn_(ln3_(x)));
    h.tokens = x;
    return h;
  }

  // attention row-distributions for the invariance tests
  std::vector<Tensor> self_attention_weights(const Tensor& tokens) const {
    const Tensor x1 = ln1_(tokens);
    return sa_.forward_detail(x1, x1).attn;
  }
  std::vector<Tensor> cross_attention_weights(const Tensor& tokens, const Tensor& local) const {
    const Tensor kv = add(local, text_pe(local.dim(0)));
    return ca_.forward_detail(ln2_(tokens), kv).attn;
  }

  Tensor text_pe(int length) const {
    return pe_text_.defined() && pe_text_.dim(0) == length
               ? pe_text_
               : sinusoidal_pe_1d(length, text_dim_);
  }

 private:
  Tensor image_pe(int rows, int cols, int dim) const {
    return pe_image_.defined() && pe_image_.dim(0) == rows * cols && pe_image_.dim(1) == dim
               ? pe_image_
               : sinusoidal_pe_2d(rows, cols, dim);
  }

  int text_dim_ = 0;
  LayerNorm ln1_, ln2_, ln3_;
  MultiHeadAttention sa_, ca_;
  FeedForward ffn_;
  Tensor pe_image_, pe_text_;
};

// Correlation map -> per-point heatmap logits -> spatial softmax -> expected
// cell-center coordinates. The fully connected layer scores every token for
// each of the K points; the expectation keeps coordinates strictly inside the
// unit square (zero logits give the image center) and makes localization a
// first-order learning problem at the default learning rate.
class GazeHead {
 public:
  GazeHead() = default;
  GazeHead(ParamStore& ps, const TrainConfig& cfg, Rng& rng) : k_(cfg.k) {
    fc_ = Linear(ps, "head.fc", cfg.model_dim, cfg.k, rng);
    coords_ = cell_centers(cfg.grid, cfg.grid);
  }

  static Tensor cell_centers(int rows, int cols) {
    std::vector<double> v(std::size_t(rows) * cols * 2);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        v[(std::size_t(r) * cols + c) * 2] = (c + 0.5) / double(cols);
        v[(std::size_t(r) * cols + c) * 2 + 1] = (r + 0.5) / double(rows);
      }
    return Tensor::from({rows * cols, 2}, std::move(v));
  }

  Tensor operator()(const CorrelationMap& h) const {
    const Tensor logits = fc_(h.tokens);                 // [S x K]
    const Tensor attn = softmax(transpose(logits), 1);   // [K x S]
    const Tensor coords = coords_.defined() && coords_.dim(0) == h.rows * h.cols
                              ? coords_
                              : cell_centers(h.rows, h.cols);
    return matmul(attn, coords);                         // [K x 2]
  }

 private:
  int k_ = 0;
  Linear fc_;
  Tensor coords_;
};

}  // namespace gem
