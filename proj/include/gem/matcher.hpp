#pragma once

#include <string>

#include "gem/gaze_graph.hpp"

namespace gem {

constexpr double kSinkhornFloor = 1e-9;
constexpr double kAffinityNormEps = 1e-5;

// Bilinear affinity M = nt * A * ns^T with a learnable square kernel,
// initialized to the identity.
class AffinityLayer {
 public:
  AffinityLayer() = default;
  AffinityLayer(ParamStore& ps, const TrainConfig& cfg) {
    a_ = ps.add_identity("match.affinity", cfg.node_dim);
  }

  Tensor operator()(const Tensor& nt, const Tensor& ns) const {
    if (nt.rank() != 2 || ns.rank() != 2 || nt.dim(1) != ns.dim(1))
      shape_error("affinity_matrix", "node features disagree: " + shape_str(nt.shape()) +
                                         " vs " + shape_str(ns.shape()));
    if (nt.dim(0) != ns.dim(0))
      shape_error("affinity_matrix", "node counts differ: " + shape_str(nt.shape()) + " vs " +
                                         shape_str(ns.shape()));
    return matmul(matmul(nt, a_), transpose(ns));
  }

 private:
  Tensor a_;
};

// Whole-matrix standardization followed by exp, so every entry is strictly
// positive before Sinkhorn.
inline Tensor positive_normalize(const Tensor& m, double eps) {
  return exp_op(instance_norm(m, eps));
}

// Alternating row/column normalization, ending on a row pass so each row is
// an exact distribution. Gradients flow through every iteration.
inline Tensor sinkhorn(const Tensor& m, int iters) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1))
    shape_error("sinkhorn", "expects a square matrix, got " + shape_str(m.shape()));
  if (iters < 1) throw std::invalid_argument("sinkhorn: iters must be >= 1");
  for (double v : m.values())
    if (!(v > 0.0)) throw std::invalid_argument("sinkhorn: entries must be strictly positive");

  Tensor x = add_scalar(m, kSinkhornFloor);
  for (int it = 0; it < iters; ++it) {
    x = div(x, sum_axis(x, 1, true));  // rows
    x = div(x, sum_axis(x, 0, true));  // columns
  }
  return div(x, sum_axis(x, 1, true));
}

// AIS: shared-weight GCN embeddings -> affinity -> positive normalization ->
// Sinkhorn. Returns the soft correspondence matrix.
inline Tensor ais_correspondence(const GcnEmbed& gcn, const AffinityLayer& affinity,
                                 const GazeGraph& gt, const GazeGraph& pred, int sinkhorn_iters) {
  const Tensor et = gcn(gt);
  const Tensor es = gcn(pred);
  return sinkhorn(positive_normalize(affinity(et, es), kAffinityNormEps), sinkhorn_iters);
}

// Per-row cross-entropy against the diagonal target:
// L = -(1/K) sum_i log c[i, i].
inline Tensor correspondence_loss(const Tensor& c) {
  if (c.rank() != 2 || c.dim(0) != c.dim(1))
    shape_error("correspondence_loss", "expects a square matrix, got " + shape_str(c.shape()));
  const int k = c.dim(0);
  for (int i = 0; i < k; ++i)
    if (!(c.at({i, i}) > 0.0))
      throw std::invalid_argument("correspondence_loss: diagonal entry " + std::to_string(i) +
                                  " is not positive");
  return mul_scalar(sum_all(log_op(take_diag(c))), -1.0 / double(k));
}

}  // namespace gem
