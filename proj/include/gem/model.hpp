#pragma once

#include <array>
#include <span>
#include <vector>

#include "gem/encoders.hpp"
#include "gem/fusion.hpp"
#include "gem/gaze_graph.hpp"
#include "gem/matcher.hpp"
#include "gem/sample.hpp"

namespace gem {

// The full pipeline: encoders -> context-aware fusion -> correlation map ->
// gaze head, plus the graph branch used by the matching loss. The edge
// generator and GCN are shared between the ground-truth and predicted graphs.
class GemModel {
 public:
  explicit GemModel(const TrainConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(cfg.seed, 0x1217));
    img_ = ImageEncoder(ps_, cfg_, rng);
    txt_ = TextEncoder(ps_, cfg_, rng);
    fuse_ = ContextAwareFusion(ps_, cfg_, rng);
    if (cfg_.fusion_mode == "context") attn_ = CorrelationAttention(ps_, cfg_, rng);
    head_ = GazeHead(ps_, cfg_, rng);
    nodes_ = NodeExtractor(ps_, cfg_, rng);
    edges_ = EdgeGenerator(ps_, cfg_, rng);
    gcn_ = GcnEmbed(ps_, cfg_, rng);
    affinity_ = AffinityLayer(ps_, cfg_);
    pe_image_ = sinusoidal_pe_2d(cfg_.grid, cfg_.grid, cfg_.model_dim);
  }

  const TrainConfig& config() const { return cfg_; }
  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }

  struct Forward {
    FeaturePyramid pyramid;
    TextFeatures text;
    Tensor fused;        // [d x G x G]
    CorrelationMap hmap;  // [S x d]
    Tensor points;       // [K x 2], each coordinate in (0, 1)
  };

  Forward forward(const Tensor& image, std::span<const int> tokens) const {
    Forward f;
    f.pyramid = img_(image);
    f.text = txt_(tokens);
    if (cfg_.text_blind) {
      f.text.global = mul_scalar(f.text.global, 0.0);
      f.text.local = mul_scalar(f.text.local, 0.0);
    }
    f.fused = fuse_(f.pyramid, f.text.global);
    f.hmap = cfg_.fusion_mode == "context" ? attn_(f.fused, f.text.local)
                                           : flatten_with_pe(f.fused, pe_image_);
    f.points = head_(f.hmap);
    return f;
  }

  GazeGraph build_graph(const CorrelationMap& h,
                        std::span<const std::array<double, 2>> points) const {
    GazeGraph g;
    g.nodes = nodes_(h, points);
    g.edges = edges_(g.nodes);
    return g;
  }

  struct Loss {
    Tensor total, mse, ce;
  };

  // Coordinate regression on the valid points plus the graph-matching
  // cross-entropy when enabled.
  Loss sample_loss(const Sample& s) const {
    const int n_valid = s.valid_count();
    if (n_valid == 0) throw std::invalid_argument("sample_loss: no valid gaze points");
    if (int(s.gaze.size()) != cfg_.k)
      shape_error("sample_loss", "expected " + std::to_string(cfg_.k) + " gaze points, got " +
                                     std::to_string(s.gaze.size()));

    const Forward f = forward(s.image_tensor(), s.tokens);

    std::vector<double> gt_flat, mask;
    for (int i = 0; i < cfg_.k; ++i) {
      gt_flat.push_back(s.gaze[std::size_t(i)][0]);
      gt_flat.push_back(s.gaze[std::size_t(i)][1]);
      mask.push_back(s.valid[std::size_t(i)] ? 1.0 : 0.0);
    }
    const Tensor gt = Tensor::from({cfg_.k, 2}, std::move(gt_flat));
    const Tensor diff = sub(f.points, gt);
    const Tensor per_point = mean_axis(mul(diff, diff), 1, true);  // [K x 1]
    const Tensor masked = mul(per_point, Tensor::from({cfg_.k, 1}, std::move(mask)));
    Loss out;
    out.mse = mul_scalar(sum_all(masked), 1.0 / double(n_valid));

    if (cfg_.use_vbmatch && cfg_.beta > 0.0) {
      std::vector<std::array<double, 2>> gt_pts, pred_pts;
      for (int i = 0; i < cfg_.k; ++i) {
        if (!s.valid[std::size_t(i)]) continue;
        gt_pts.push_back(s.gaze[std::size_t(i)]);
        pred_pts.push_back({f.points.at({i, 0}), f.points.at({i, 1})});
      }
      const GazeGraph gt_graph = build_graph(f.hmap, gt_pts);
      const GazeGraph pred_graph = build_graph(f.hmap, pred_pts);
      const Tensor c = ais_correspondence(gcn_, affinity_, gt_graph, pred_graph,
                                          cfg_.sinkhorn_iters);
      out.ce = correspondence_loss(c);
    } else {
      out.ce = Tensor::scalar(0.0);
    }
    out.total = add(mul_scalar(out.mse, cfg_.alpha), mul_scalar(out.ce, cfg_.beta));
    return out;
  }

  std::vector<std::array<double, 2>> predict(const Tensor& image,
                                             std::span<const int> tokens) const {
    NoGradGuard ng;
    const Forward f = forward(image, tokens);
    std::vector<std::array<double, 2>> pts(std::size_t(cfg_.k));
    for (int i = 0; i < cfg_.k; ++i) pts[std::size_t(i)] = {f.points.at({i, 0}), f.points.at({i, 1})};
    return pts;
  }

  const GcnEmbed& gcn() const { return gcn_; }
  const AffinityLayer& affinity() const { return affinity_; }
  const EdgeGenerator& edge_generator() const { return edges_; }

 private:
  TrainConfig cfg_;
  ParamStore ps_;
  ImageEncoder img_;
  TextEncoder txt_;
  ContextAwareFusion fuse_;
  CorrelationAttention attn_;
  GazeHead head_;
  NodeExtractor nodes_;
  EdgeGenerator edges_;
  GcnEmbed gcn_;
  AffinityLayer affinity_;
  Tensor pe_image_;
};

}  // namespace gem
