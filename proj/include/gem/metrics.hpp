#pragma once

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "gem/model.hpp"
#include "gem/sample.hpp"

namespace gem {

struct MetricsReport {
  double mse = 0.0;
  double mae = 0.0;
  double pck02 = 0.0;
  double pck03 = 0.0;
  double pck04 = 0.0;
  int n = 0;  // samples evaluated
};

struct PointComparison {
  std::vector<std::array<double, 2>> pred, gt;
  std::vector<std::uint8_t> valid;
};

// Index-wise pairing, the ordering the regression objective supervises.
// PCK@t counts valid points whose Euclidean distance to the paired ground
// truth is <= t (inclusive), as a percentage.
inline MetricsReport compute_metrics(std::span<const PointComparison> cases) {
  MetricsReport r;
  r.n = int(cases.size());
  double se = 0.0, ae = 0.0;
  std::int64_t hits02 = 0, hits03 = 0, hits04 = 0, n_points = 0;
  for (const auto& c : cases) {
    for (std::size_t i = 0; i < c.gt.size(); ++i) {
      if (!c.valid[i]) continue;
      const double dx = c.pred[i][0] - c.gt[i][0];
      const double dy = c.pred[i][1] - c.gt[i][1];
      se += (dx * dx + dy * dy) * 0.5;
      ae += (std::abs(dx) + std::abs(dy)) * 0.5;
      const double dist = std::sqrt(dx * dx + dy * dy);
      hits02 += dist <= 0.2 ? 1 : 0;
      hits03 += dist <= 0.3 ? 1 : 0;
      hits04 += dist <= 0.4 ? 1 : 0;
      ++n_points;
    }
  }
  if (n_points > 0) {
    r.mse = se * (1.0 / double(n_points));
    r.mae = ae * (1.0 / double(n_points));
    r.pck02 = 100.0 * double(hits02) / double(n_points);
    r.pck03 = 100.0 * double(hits03) / double(n_points);
    r.pck04 = 100.0 * double(hits04) / double(n_points);
  }
  return r;
}

inline MetricsReport evaluate(const GemModel& model, std::span<const Sample> data) {
  std::vector<PointComparison> cases;
  cases.reserve(data.size());
  for (const Sample& s : data) {
    PointComparison c;
    c.pred = model.predict(s.image_tensor(), s.tokens);
    c.gt = s.gaze;
    c.valid = s.valid;
    cases.push_back(std::move(c));
  }
  return compute_metrics(cases);
}

}  // namespace gem
