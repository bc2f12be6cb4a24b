#include <catch2/catch_amalgamated.hpp>

#include "gem/encoders.hpp"
#include "gem/fusion.hpp"
#include "gem/grad_check.hpp"
#include "gem/model.hpp"
#include "gem/synth.hpp"
#include "test_util.hpp"

using namespace gem;

namespace {

FeaturePyramid random_pyramid(const TrainConfig& cfg, Rng& rng) {
  auto rand_tensor = [&rng](Shape s) {
    std::vector<double> v(std::size_t(numel(s)));
    for (double& x : v) x = rng.uniform(-1, 1);
    return Tensor::from(std::move(s), std::move(v));
  };
  const int g16 = cfg.image_size / 16;
  FeaturePyramid p;
  p.f1 = rand_tensor({cfg.c1, g16, g16});
  p.f2 = rand_tensor({cfg.c2, 2 * g16, 2 * g16});
  p.f3 = rand_tensor({cfg.c3, 4 * g16, 4 * g16});
  return p;
}

Tensor random_vec(int n, Rng& rng) {
  std::vector<double> v(std::size_t(n), 0.0);
  for (double& x : v) x = rng.uniform(-1, 1);
  return Tensor::from({n}, std::move(v));
}

}  // namespace

TEST_CASE("coord_channels endpoints, center and degenerate axes") {
  Tensor c2 = coord_channels(2, 2);
  REQUIRE(c2.shape() == Shape{2, 2, 2});
  // x channel rows: [-1, 1]
  REQUIRE(c2.at({0, 0, 0}) == -1.0);
  REQUIRE(c2.at({0, 0, 1}) == 1.0);
  REQUIRE(c2.at({0, 1, 0}) == -1.0);
  REQUIRE(c2.at({0, 1, 1}) == 1.0);
  // y channel columns: [-1, -1] / [1, 1]
  REQUIRE(c2.at({1, 0, 0}) == -1.0);
  REQUIRE(c2.at({1, 0, 1}) == -1.0);
  REQUIRE(c2.at({1, 1, 0}) == 1.0);
  REQUIRE(c2.at({1, 1, 1}) == 1.0);

  Tensor c3 = coord_channels(3, 3);
  REQUIRE(c3.at({0, 1, 1}) == 0.0);
  REQUIRE(c3.at({1, 1, 1}) == 0.0);

  Tensor row = coord_channels(1, 5);
  for (int x = 0; x < 5; ++x) REQUIRE(row.at({1, 0, x}) == 0.0);
  Tensor col = coord_channels(5, 1);
  for (int y = 0; y < 5; ++y) REQUIRE(col.at({0, y, 0}) == 0.0);
}

TEST_CASE("fuse_pyramid traces the stated scale algebra") {
  TrainConfig cfg;  // 128x128 defaults
  Rng rng(3);
  ParamStore ps;
  ContextAwareFusion fuse(ps, cfg, rng);
  Rng drng(5);
  FeaturePyramid p = random_pyramid(cfg, drng);
  Tensor fm = fuse(p, random_vec(cfg.text_dim, drng));
  REQUIRE(fm.shape() == Shape{64, 16, 16});
  REQUIRE(all_finite(fm));
}

TEST_CASE("fuse_pyramid rejects mismatched pyramid scales") {
  TrainConfig cfg = testing::tiny_config();
  Rng rng(3);
  ParamStore ps;
  ContextAwareFusion fuse(ps, cfg, rng);
  Rng drng(5);
  FeaturePyramid p = random_pyramid(cfg, drng);
  p.f2 = Tensor::zeros({cfg.c2, 5, 5});
  REQUIRE_THROWS_AS(fuse(p, random_vec(cfg.text_dim, drng)), std::invalid_argument);
}

TEST_CASE("zero text with a zero gate bias annihilates the gated level") {
  TrainConfig cfg = testing::tiny_config();
  Rng rng(7);
  ParamStore ps;
  ContextAwareFusion fuse(ps, cfg, rng);
  // zero the gate path biases so mlp(0) == 0
  for (double& v : ps.get("fuse.mlp1.b").mutable_values()) v = 0.0;
  for (double& v : ps.get("fuse.mlp2.b").mutable_values()) v = 0.0;
  const Tensor gate = fuse.text_gate(Tensor::zeros({cfg.text_dim}));
  for (double v : gate.values()) REQUIRE(v == 0.0);
}

TEST_CASE("changing the global text feature changes the fused map") {
  TrainConfig cfg = testing::tiny_config();
  Rng rng(9);
  ParamStore ps;
  ContextAwareFusion fuse(ps, cfg, rng);
  Rng drng(11);
  FeaturePyramid p = random_pyramid(cfg, drng);
  Tensor fm1 = fuse(p, random_vec(cfg.text_dim, drng));
  Tensor fm2 = fuse(p, random_vec(cfg.text_dim, drng));
  double diff = 0.0;
  for (std::size_t i = 0; i < fm1.values().size(); ++i)
    diff = std::max(diff, std::abs(fm1.values()[i] - fm2.values()[i]));
  REQUIRE(diff > 1e-9);
}

TEST_CASE("attention block output shape and row-stochastic attention") {
  TrainConfig cfg;  // S = 256, d = 64, M = 4
  Rng rng(13);
  ParamStore ps;
  CorrelationAttention attn(ps, cfg, rng);
  Rng drng(17);
  std::vector<double> fm_v(std::size_t(64) * 16 * 16);
  for (double& v : fm_v) v = drng.uniform(-1, 1);
  Tensor fm = Tensor::from({64, 16, 16}, fm_v);
  std::vector<double> loc_v(std::size_t(4) * 64);
  for (double& v : loc_v) v = drng.uniform(-1, 1);
  Tensor local = Tensor::from({4, 64}, loc_v);

  CorrelationMap h = attn(fm, local);
  REQUIRE(h.tokens.shape() == Shape{256, 64});
  REQUIRE(h.rows == 16);
  REQUIRE(h.cols == 16);

  const CorrelationMap base = flatten_with_pe(fm);
  for (const Tensor& w : attn.self_attention_weights(base.tokens)) {
    REQUIRE(w.shape() == Shape{256, 256});
    for (int i = 0; i < 256; ++i) {
      double acc = 0.0;
      for (int j = 0; j < 256; ++j) acc += w.at({i, j});
      REQUIRE(std::abs(acc - 1.0) <= 1e-12);
    }
  }
  for (const Tensor& w : attn.cross_attention_weights(base.tokens, local)) {
    REQUIRE(w.shape() == Shape{256, 4});
    for (int i = 0; i < 256; ++i) {
      double acc = 0.0;
      for (int j = 0; j < 4; ++j) acc += w.at({i, j});
      REQUIRE(std::abs(acc - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("cross attention is invariant to consistent key/value permutation") {
  TrainConfig cfg = testing::tiny_config();
  Rng rng(19);
  ParamStore ps;
  CorrelationAttention attn(ps, cfg, rng);
  Rng drng(23);
  std::vector<double> fm_v(std::size_t(cfg.model_dim) * 6 * 6);
  for (double& v : fm_v) v = drng.uniform(-1, 1);
  Tensor fm = Tensor::from({cfg.model_dim, 6, 6}, fm_v);
  std::vector<double> loc_v(std::size_t(4) * cfg.text_dim);
  for (double& v : loc_v) v = drng.uniform(-1, 1);
  Tensor local = Tensor::from({4, cfg.text_dim}, loc_v);

  // local2 + PE == P * (local + PE), with P swapping rows 1 and 3
  const Tensor pe = sinusoidal_pe_1d(4, cfg.text_dim);
  const std::vector<int> perm{0, 3, 2, 1};
  std::vector<double> loc2(loc_v.size());
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < cfg.text_dim; ++j)
      loc2[std::size_t(i) * cfg.text_dim + j] =
          local.at({perm[std::size_t(i)], j}) + pe.at({perm[std::size_t(i)], j}) - pe.at({i, j});
  Tensor local_permuted = Tensor::from({4, cfg.text_dim}, std::move(loc2));

  CorrelationMap a = attn(fm, local);
  CorrelationMap b = attn(fm, local_permuted);
  for (std::size_t i = 0; i < a.tokens.values().size(); ++i)
    REQUIRE(std::abs(a.tokens.values()[i] - b.tokens.values()[i]) <= 1e-9);
}

TEST_CASE("gaze head: zero logits give centered points, outputs stay interior") {
  TrainConfig cfg = testing::tiny_config();
  Rng rng(29);
  ParamStore ps;
  GazeHead head(ps, cfg, rng);
  for (double& v : ps.get("head.fc.w").mutable_values()) v = 0.0;
  for (double& v : ps.get("head.fc.b").mutable_values()) v = 0.0;
  Rng drng(31);
  std::vector<double> tok(std::size_t(36) * cfg.model_dim);
  for (double& v : tok) v = drng.uniform(-1, 1);
  CorrelationMap h{Tensor::from({36, cfg.model_dim}, std::move(tok)), 6, 6};
  Tensor pts = head(h);
  REQUIRE(pts.shape() == Shape{cfg.k, 2});
  for (double v : pts.values()) REQUIRE(std::abs(v - 0.5) <= 1e-12);
}

TEST_CASE("gaze head keeps finite logits strictly inside the unit square") {
  TrainConfig cfg = testing::tiny_config();
  cfg.k = 5;
  Rng rng(37);
  ParamStore ps;
  GazeHead head(ps, cfg, rng);
  Rng drng(41);
  std::vector<double> tok(std::size_t(36) * cfg.model_dim);
  for (double& v : tok) v = drng.uniform(-5, 5);
  CorrelationMap h{Tensor::from({36, cfg.model_dim}, std::move(tok)), 6, 6};
  Tensor pts = head(h);
  REQUIRE(pts.size() == 10);
  for (double v : pts.values()) {
    REQUIRE(v > 0.0);
    REQUIRE(v < 1.0);
  }
}

TEST_CASE("full forward is deterministic and text-sensitive") {
  TrainConfig cfg = testing::tiny_config();
  GemModel model(cfg);
  Sample s = synth_sample(3, 0, cfg);

  auto p1 = model.predict(s.image_tensor(), s.tokens);
  auto p2 = model.predict(s.image_tensor(), s.tokens);
  for (int i = 0; i < cfg.k; ++i) {
    REQUIRE(p1[std::size_t(i)][0] == p2[std::size_t(i)][0]);
    REQUIRE(p1[std::size_t(i)][1] == p2[std::size_t(i)][1]);
  }

  // across random parameter draws, some query change must move the output
  bool sensitive = false;
  for (std::uint64_t seed = 1; seed <= 5 && !sensitive; ++seed) {
    TrainConfig c2 = cfg;
    c2.seed = seed;
    GemModel m(c2);
    auto a = m.predict(s.image_tensor(), std::vector<int>{1, 3, 2, 0});
    auto b = m.predict(s.image_tensor(), std::vector<int>{1, 4, 2, 0});
    for (int i = 0; i < cfg.k; ++i)
      if (a[std::size_t(i)] != b[std::size_t(i)]) sensitive = true;
  }
  REQUIRE(sensitive);
}

TEST_CASE("fusion-to-prediction path passes the gradient check") {
  TrainConfig cfg = testing::tiny_config();
  cfg.c1 = 4;
  cfg.c2 = 4;
  cfg.c3 = 4;
  cfg.text_dim = 8;
  cfg.model_dim = 8;
  cfg.k = 2;
  Rng rng(43);
  ParamStore ps;
  ContextAwareFusion fuse(ps, cfg, rng);
  CorrelationAttention attn(ps, cfg, rng);
  GazeHead head(ps, cfg, rng);
  Rng drng(47);
  FeaturePyramid p = random_pyramid(cfg, drng);
  Tensor g = random_vec(cfg.text_dim, drng);
  std::vector<double> loc_v(std::size_t(4) * cfg.text_dim);
  for (double& v : loc_v) v = drng.uniform(-1, 1);
  Tensor local = Tensor::from({4, cfg.text_dim}, std::move(loc_v));
  auto loss = [&](ParamStore&) {
    CorrelationMap h = attn(fuse(p, g), local);
    Tensor pts = head(h);
    return sum_all(mul(pts, pts));
  };
  REQUIRE(grad_check(loss, ps, 1e-5) < 1e-4);
}
