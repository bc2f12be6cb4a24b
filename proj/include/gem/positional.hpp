#pragma once

#include <cmath>

#include "gem/tensor.hpp"

namespace gem {

// Fixed sinusoidal position embedding for a token sequence: parameter-free,
// injective over positions.
inline Tensor sinusoidal_pe_1d(int length, int dim) {
  if (dim % 2) shape_error("sinusoidal_pe_1d", "dim must be even, got " + std::to_string(dim));
  std::vector<double> v(std::size_t(length) * dim);
  for (int pos = 0; pos < length; ++pos) {
    for (int i = 0; i < dim / 2; ++i) {
      const double freq = std::exp(-std::log(10000.0) * (2.0 * i / double(dim)));
      v[std::size_t(pos) * dim + 2 * i] = std::sin(pos * freq);
      v[std::size_t(pos) * dim + 2 * i + 1] = std::cos(pos * freq);
    }
  }
  return Tensor::from({length, dim}, std::move(v));
}

// 2-D variant for a flattened rows x cols grid (row-major tokens): the first
// half of each embedding encodes the column, the second half the row.
inline Tensor sinusoidal_pe_2d(int rows, int cols, int dim) {
  if (dim % 4)
    shape_error("sinusoidal_pe_2d", "dim must be divisible by 4, got " + std::to_string(dim));
  const int half = dim / 2;
  const Tensor pc = sinusoidal_pe_1d(cols, half);
  const Tensor pr = sinusoidal_pe_1d(rows, half);
  std::vector<double> v(std::size_t(rows) * cols * dim);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      double* out = v.data() + (std::size_t(r) * cols + c) * dim;
      for (int i = 0; i < half; ++i) out[i] = pc.at({c, i});
      for (int i = 0; i < half; ++i) out[half + i] = pr.at({r, i});
    }
  return Tensor::from({rows * cols, dim}, std::move(v));
}

}  // namespace gem
