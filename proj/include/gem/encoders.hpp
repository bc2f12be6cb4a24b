#pragma once

#include <span>
#include <string>
#include <vector>

#include "gem/config.hpp"
#include "gem/layers.hpp"
#include "gem/positional.hpp"

namespace gem {

// Multi-scale image features at 1/16, 1/8 and 1/4 of the input extents.
struct FeaturePyramid {
  Tensor f1;  // [c1 x H/16 x W/16]
  Tensor f2;  // [c2 x H/8  x W/8]
  Tensor f3;  // [c3 x H/4  x W/4]
};

struct TextFeatures {
  Tensor global;  // [D]
  Tensor local;   // [M x D]
};

// Four stride-2 stages, then 1x1 projections tapped off the 1/4, 1/8 and
// 1/16 maps.
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(ParamStore& ps, const TrainConfig& cfg, Rng& rng) {
    const auto& wdt = cfg.enc_widths;
    stages_[0] = Conv2dLayer(ps, "img.stage1", 1, wdt[0], 3, 2, 1, rng, true);
    stages_[1] = Conv2dLayer(ps, "img.stage2", wdt[0], wdt[1], 3, 2, 1, rng, true);
    stages_[2] = Conv2dLayer(ps, "img.stage3", wdt[1], wdt[2], 3, 2, 1, rng, true);
    stages_[3] = Conv2dLayer(ps, "img.stage4", wdt[2], wdt[3], 3, 2, 1, rng, true);
    tap1_ = Conv2dLayer(ps, "img.tap1", wdt[3], cfg.c1, 1, 1, 0, rng);
    tap2_ = Conv2dLayer(ps, "img.tap2", wdt[2], cfg.c2, 1, 1, 0, rng);
    tap3_ = Conv2dLayer(ps, "img.tap3", wdt[1], cfg.c3, 1, 1, 0, rng);
  }

  FeaturePyramid operator()(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != 1)
      shape_error("encode_image", "expected [1 x H x W], got " + shape_str(image.shape()));
    const int h = image.dim(1), w = image.dim(2);
    if (h % 16 || w % 16)
      shape_error("encode_image",
                  "extents must be divisible by 16, got " + shape_str(image.shape()));
    for (double v : image.values())
      if (!(v >= 0.0 && v <= 1.0))
        throw std::invalid_argument("encode_image: pixel values must lie in [0, 1]");

    const Tensor s1 = relu(stages_[0](image));   // 1/2
    const Tensor s2 = relu(stages_[1](s1));      // 1/4
    const Tensor s3 = relu(stages_[2](s2));      // 1/8
    const Tensor s4 = relu(stages_[3](s3));      // 1/16
    FeaturePyramid p;
    p.f1 = tap1_(s4);
    p.f2 = tap2_(s3);
    p.f3 = tap3_(s2);
    return p;
  }

 private:
  Conv2dLayer stages_[4];
  Conv2dLayer tap1_, tap2_, tap3_;
};

// Token embedding + 1-D sinusoidal positions + one feed-forward layer; the
// global feature is the mean over token rows.
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(ParamStore& ps, const TrainConfig& cfg, Rng& rng)
      : vocab_(cfg.vocab), dim_(cfg.text_dim) {
    table_ = ps.add_uniform("txt.embed", {cfg.vocab, cfg.text_dim}, cfg.text_dim, rng, kWeightGain);
    ff_ = Linear(ps, "txt.ff", cfg.text_dim, cfg.text_dim, rng);
    pe_ = sinusoidal_pe_1d(cfg.token_count, cfg.text_dim);
  }

  TextFeatures operator()(std::span<const int> tokens) const {
    if (tokens.empty()) shape_error("encode_text", "token sequence is empty");
    for (int t : tokens)
      if (t < 0 || t >= vocab_)
        throw std::invalid_argument("encode_text: token id " + std::to_string(t) +
                                    " out of range [0, " + std::to_string(vocab_) + ")");
    const Tensor emb = embed(table_, {tokens.begin(), tokens.end()});
    const Tensor pe = pe_.defined() && pe_.dim(0) == int(tokens.size())
                          ? pe_
                          : sinusoidal_pe_1d(int(tokens.size()), dim_);
    TextFeatures f;
    f.local = relu(ff_(add(emb, pe)));
    f.global = reshape(mean_axis(f.local, 0, true), {dim_});
    return f;
  }

 private:
  int vocab_ = 0;
  int dim_ = 0;
  Tensor table_;
  Linear ff_;
  Tensor pe_;
};

}  // namespace gem
