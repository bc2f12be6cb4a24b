#pragma once

#include <algorithm>
#include <cmath>

#include "gem/config.hpp"
#include "gem/rng.hpp"
#include "gem/sample.hpp"

namespace gem {

// Two Gaussian blobs of distinct classes on light background noise; the query
// names one of them and the gaze points scatter around its center in a star
// pattern (the center itself plus satellites).
//
// Each sample is generated from a seed derived from (dataset seed, index), so
// generation is order-independent and bitwise reproducible.
inline Sample synth_sample(std::uint64_t dataset_seed, std::uint64_t index,
                           const TrainConfig& cfg) {
  Rng rng(mix_seed(dataset_seed, index));
  const int h = cfg.image_size, w = cfg.image_size;

  const int class_a = int(rng.below(kNumClasses));
  const int class_b = int((class_a + 1 + rng.below(kNumClasses - 1)) % kNumClasses);

  std::array<double, 2> center_a{}, center_b{};
  for (int attempt = 0;; ++attempt) {
    center_a = {rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)};
    center_b = {rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)};
    const double dx = center_a[0] - center_b[0], dy = center_a[1] - center_b[1];
    if (std::sqrt(dx * dx + dy * dy) >= 0.3) break;
    if (attempt > 10000) throw NumericError("synth_sample: center separation never satisfied");
  }
  const bool first_is_target = rng.below(2) == 0;

  Sample s;
  s.height = h;
  s.width = w;
  s.image.resize(std::size_t(h) * w);
  for (double& p : s.image) p = rng.uniform(0.0, 0.1);

  auto render = [&](const std::array<double, 2>& c, int cls) {
    const double sigma = 4.0 + 2.0 * cls;  // pixels
    const double cx = c[0] * w, cy = c[1] * h;
    const int reach = int(std::ceil(4.0 * sigma));
    const int x0 = std::max(0, int(cx) - reach), x1 = std::min(w - 1, int(cx) + reach);
    const int y0 = std::max(0, int(cy) - reach), y1 = std::min(h - 1, int(cy) + reach);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = (x + 0.5) - cx, dy = (y + 0.5) - cy;
        s.image[std::size_t(y) * w + x] +=
            0.9 * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      }
  };
  render(center_a, class_a);
  render(center_b, class_b);
  for (double& p : s.image) p = std::clamp(p, 0.0, 1.0);

  const auto& target = first_is_target ? center_a : center_b;
  const int target_class = first_is_target ? class_a : class_b;
  s.class_id = target_class;
  s.target_center = target;

  s.tokens.assign(std::size_t(cfg.token_count), kPadToken);
  s.tokens[0] = kBosToken;
  s.tokens[1] = class_token(target_class);
  s.tokens[2] = kEosToken;

  s.gaze.resize(std::size_t(cfg.k));
  s.valid.assign(std::size_t(cfg.k), 1);
  s.gaze[0] = target;
  for (int i = 1; i < cfg.k; ++i) {
    s.gaze[std::size_t(i)] = {std::clamp(target[0] + 0.04 * rng.normal(), 0.0, 1.0),
                              std::clamp(target[1] + 0.04 * rng.normal(), 0.0, 1.0)};
  }
  return s;
}

}  // namespace gem
