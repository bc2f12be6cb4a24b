#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "gem/fusion.hpp"
#include "gem/layers.hpp"

namespace gem {

constexpr int kCropSize = 6;

struct CellIndex {
  int row = 0;
  int col = 0;
};

// Grid cell containing a normalized point: floor(p * G) per axis, clamped so
// p = 1.0 stays inside.
inline CellIndex gaze_to_cell(double x, double y, int grid) {
  if (grid < kCropSize)
    shape_error("gaze_to_cell", "grid must be >= " + std::to_string(kCropSize));
  auto clamp_floor = [grid](double p) {
    const int c = int(std::floor(p * grid));
    return std::max(0, std::min(grid - 1, c));
  };
  return CellIndex{clamp_floor(y), clamp_floor(x)};
}

// Start of the 6-cell window [c-2, c+3] along one axis, shifted to stay
// inside [0, grid-1]; always exactly 6 cells.
inline int crop_start(int center, int grid) {
  if (grid < kCropSize)
    shape_error("crop_window", "grid must be >= " + std::to_string(kCropSize));
  return std::max(0, std::min(grid - kCropSize, center - 2));
}

struct GazeGraph {
  Tensor nodes;  // [K x d_n]
  Tensor edges;  // [K x K], row-stochastic
};

// Crops a 6x6 patch of correlation-map tokens around each point, flattens it
// and projects to the node width. Point coordinates only select indices;
// gradients flow through the map values and the projection.
class NodeExtractor {
 public:
  NodeExtractor() = default;
  NodeExtractor(ParamStore& ps, const TrainConfig& cfg, Rng& rng) {
    proj_ = Linear(ps, "graph.node_proj", kCropSize * kCropSize * cfg.model_dim, cfg.node_dim,
                   rng);
  }

  Tensor operator()(const CorrelationMap& h, std::span<const std::array<double, 2>> points) const {
    if (points.empty()) shape_error("node_features", "no points");
    const int d = h.tokens.dim(1);
    std::vector<int> ids;
    ids.reserve(points.size() * kCropSize * kCropSize);
    for (const auto& p : points) {
      const CellIndex c = gaze_to_cell(p[0], p[1], h.cols);
      const int r0 = crop_start(c.row, h.rows);
      const int c0 = crop_start(c.col, h.cols);
      for (int dy = 0; dy < kCropSize; ++dy)
        for (int dx = 0; dx < kCropSize; ++dx) ids.push_back((r0 + dy) * h.cols + (c0 + dx));
    }
    const Tensor crops = gather_rows(h.tokens, std::move(ids));
    const Tensor flat = reshape(crops, {int(points.size()), kCropSize * kCropSize * d});
    return relu(proj_(flat));
  }

 private:
  Linear proj_;
};

// One encoder layer learns soft edge features; the adjacency is the row
// softmax of their scaled inner products.
class EdgeGenerator {
 public:
  EdgeGenerator() = default;
  EdgeGenerator(ParamStore& ps, const TrainConfig& cfg, Rng& rng) {
    ln1_ = LayerNorm(ps, "edge.ln1", cfg.node_dim);
    ln2_ = LayerNorm(ps, "edge.ln2", cfg.node_dim);
    sa_ = MultiHeadAttention(ps, "edge.sa", cfg.node_dim, cfg.node_dim, cfg.heads, rng);
    ffn_ = FeedForward(ps, "edge.ffn", cfg.node_dim, 4 * cfg.node_dim, rng);
  }

  Tensor soft_features(const Tensor& nodes) const {
    Tensor x = nodes;
    const Tensor x1 = ln1_(x);
    x = add(x, sa_(x1, x1));
    x = add(x, ffn_(ln2_(x)));
    return x;
  }

  static Tensor inner_softmax(const Tensor& e) {
    const double scale = 1.0 / std::sqrt(double(e.dim(1)));
    return softmax(mul_scalar(matmul(e, transpose(e)), scale), 1);
  }

  Tensor operator()(const Tensor& nodes) const { return inner_softmax(soft_features(nodes)); }

 private:
  LayerNorm ln1_, ln2_;
  MultiHeadAttention sa_;
  FeedForward ffn_;
};

// Two propagation layers N <- relu(E * N * W); weights are shared by both
// graph branches.
class GcnEmbed {
 public:
  GcnEmbed() = default;
  GcnEmbed(ParamStore& ps, const TrainConfig& cfg, Rng& rng) {
    w1_ = ps.add_uniform("gcn.w1", {cfg.node_dim, cfg.node_dim}, cfg.node_dim, rng, kWeightGain);
    w2_ = ps.add_uniform("gcn.w2", {cfg.node_dim, cfg.node_dim}, cfg.node_dim, rng, kWeightGain);
  }

  static Tensor layer(const Tensor& edges, const Tensor& nodes, const Tensor& w) {
    return relu(matmul(matmul(edges, nodes), w));
  }

  Tensor operator()(const GazeGraph& g) const { return layer(g.edges, layer(g.edges, g.nodes, w1_), w2_); }

 private:
  Tensor w1_, w2_;
};

}  // namespace gem
