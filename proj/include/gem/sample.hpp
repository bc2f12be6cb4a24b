#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "gem/tensor.hpp"

namespace gem {

// One (image, query, gaze) training record. Gaze coordinates are normalized
// (x, y) in [0, 1]^2.
struct Sample {
  int height = 0;
  int width = 0;
  std::vector<double> image;  // row-major, values in [0, 1]
  std::vector<int> tokens;
  std::vector<std::array<double, 2>> gaze;
  std::vector<std::uint8_t> valid;
  int class_id = -1;
  std::array<double, 2> target_center{0.0, 0.0};

  Tensor image_tensor() const { return Tensor::from({1, height, width}, image); }

  int valid_count() const {
    int n = 0;
    for (auto v : valid) n += v ? 1 : 0;
    return n;
  }
};

}  // namespace gem
