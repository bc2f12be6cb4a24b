#pragma once

#include "gem/tensor.hpp"

namespace gem {

namespace detail {

// Shared cross-correlation core; output extents are supplied by the callers.
inline Tensor conv2d_impl(const Tensor& x, const Tensor& w, int stride, int pad, int ho, int wo,
                          const char* name) {
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int co = w.dim(0), k = w.dim(2);
  const bool pointwise = k == 1 && stride == 1 && pad == 0;
  const double* xv = x.values().data();
  const double* wv = w.values().data();
  std::vector<double> out(std::size_t(co) * ho * wo, 0.0);
  double* ov = out.data();
  const std::int64_t work = std::int64_t(co) * ho * wo * ci * k * k;
  if (pointwise) {
    const std::int64_t plane = std::int64_t(h) * wd;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (int oc = 0; oc < co; ++oc) {
      double* orow = ov + std::size_t(oc) * plane;
      for (int ic = 0; ic < ci; ++ic) {
        const double wk = wv[std::size_t(oc) * ci + ic];
        const double* xch = xv + std::size_t(ic) * plane;
        for (std::int64_t p = 0; p < plane; ++p) orow[p] += wk * xch[p];
      }
    }
  } else {
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (int oc = 0; oc < co; ++oc) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          double acc = 0.0;
          for (int ic = 0; ic < ci; ++ic) {
            const double* xch = xv + std::size_t(ic) * h * wd;
            const double* wch = wv + (std::size_t(oc) * ci + ic) * k * k;
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              const double* xrow = xch + std::size_t(iy) * wd;
              const double* wrow = wch + std::size_t(ky) * k;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= wd) continue;
                acc += wrow[kx] * xrow[ix];
              }
            }
          }
          ov[(std::size_t(oc) * ho + oy) * wo + ox] = acc;
        }
      }
    }
  }
  const Tensor parents[2] = {x, w};
  return Tensor::make_op(
      {co, ho, wo}, std::move(out), parents, name,
      [ci, h, wd, co, k, stride, pad, ho, wo, work, pointwise](detail::Node& self) {
        detail::Node& nx = *self.parents[0];
        detail::Node& nw = *self.parents[1];
        const double* g = self.grad.data();
        const std::int64_t plane = std::int64_t(h) * wd;
        if (nx.requires_grad) {
          nx.ensure_grad();
          double* gx = nx.grad.data();
          const double* wv = nw.value.data();
          // scatter form of the transposed convolution: per input channel,
          // walk the outputs once; disjoint writes keep it deterministic
#pragma omp parallel for schedule(static) if (work > kParallelWork)
          for (int ic = 0; ic < ci; ++ic) {
            double* gxch = gx + std::size_t(ic) * plane;
            if (pointwise) {
              for (int oc = 0; oc < co; ++oc) {
                const double wk = wv[std::size_t(oc) * ci + ic];
                const double* gch = g + std::size_t(oc) * plane;
                for (std::int64_t p = 0; p < plane; ++p) gxch[p] += wk * gch[p];
              }
              continue;
            }
            for (int oc = 0; oc < co; ++oc) {
              const double* gch = g + std::size_t(oc) * ho * wo;
              const double* wch = wv + (std::size_t(oc) * ci + ic) * k * k;
              for (int ky = 0; ky < k; ++ky) {
                for (int oy = 0; oy < ho; ++oy) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= h) continue;
                  double* gxrow = gxch + std::size_t(iy) * wd;
                  const double* grow = gch + std::size_t(oy) * wo;
                  const double* wrow = wch + std::size_t(ky) * k;
                  for (int kx = 0; kx < k; ++kx) {
                    const double wk = wrow[kx];
                    const int base = -pad + kx;
                    for (int ox = 0; ox < wo; ++ox) {
                      const int ix = ox * stride + base;
                      if (ix < 0 || ix >= wd) continue;
                      gxrow[ix] += grow[ox] * wk;
                    }
                  }
                }
              }
            }
          }
        }
        if (nw.requires_grad) {
          nw.ensure_grad();
          double* gw = nw.grad.data();
          const double* xv = nx.value.data();
#pragma omp parallel for schedule(static) if (work > kParallelWork)
          for (int oc = 0; oc < co; ++oc) {
            const double* gch = g + std::size_t(oc) * ho * wo;
            if (pointwise) {
              for (int ic = 0; ic < ci; ++ic) {
                const double* xch = xv + std::size_t(ic) * plane;
                double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
                std::int64_t p = 0;
                for (; p + 4 <= plane; p += 4) {
                  a0 += gch[p] * xch[p];
                  a1 += gch[p + 1] * xch[p + 1];
                  a2 += gch[p + 2] * xch[p + 2];
                  a3 += gch[p + 3] * xch[p + 3];
                }
                double acc = (a0 + a1) + (a2 + a3);
                for (; p < plane; ++p) acc += gch[p] * xch[p];
                gw[std::size_t(oc) * ci + ic] += acc;
              }
              continue;
            }
            for (int ic = 0; ic < ci; ++ic) {
              const double* xch = xv + std::size_t(ic) * h * wd;
              double* wch = gw + (std::size_t(oc) * ci + ic) * k * k;
              for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                  double acc = 0.0;
                  for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    const double* xrow = xch + std::size_t(iy) * wd;
                    const double* grow = gch + std::size_t(oy) * wo;
                    for (int ox = 0; ox < wo; ++ox) {
                      const int ix = ox * stride - pad + kx;
                      if (ix < 0 || ix >= wd) continue;
                      acc += grow[ox] * xrow[ix];
                    }
                  }
                  wch[std::size_t(ky) * k + kx] += acc;
                }
              }
            }
          }
        }
      });
}

inline void conv2d_check(const Tensor& x, const Tensor& w, int stride, int pad,
                         const char* name) {
  if (x.rank() != 3)
    shape_error(name, "input must be [C x H x W], got " + shape_str(x.shape()));
  if (w.rank() != 4)
    shape_error(name, "weight must be [Co x Ci x k x k], got " + shape_str(w.shape()));
  if (w.dim(2) != w.dim(3))
    shape_error(name, "kernel must be square, got " + shape_str(w.shape()));
  if (w.dim(2) % 2 == 0) shape_error(name, "kernel size must be odd, got " + shape_str(w.shape()));
  if (w.dim(1) != x.dim(0))
    shape_error(name, "input channels " + shape_str(x.shape()) + " do not match weight " +
                          shape_str(w.shape()));
  if (stride < 1) shape_error(name, "stride must be >= 1");
  if (pad < 0) shape_error(name, "pad must be >= 0");
}

}  // namespace detail

// Cross-correlation with zero padding. The output extent (H + 2*pad - k) /
// stride + 1 must be integral.
inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  detail::conv2d_check(x, w, stride, pad, "conv2d");
  const int h = x.dim(1), wd = x.dim(2), k = w.dim(2);
  const int hn = h + 2 * pad - k, wn = wd + 2 * pad - k;
  if (hn < 0 || wn < 0 || hn % stride || wn % stride)
    shape_error("conv2d", "non-integral output extent for input " + shape_str(x.shape()) +
                              ", kernel " + std::to_string(k) + ", stride " +
                              std::to_string(stride) + ", pad " + std::to_string(pad));
  return detail::conv2d_impl(x, w, stride, pad, hn / stride + 1, wn / stride + 1, "conv2d");
}

// Floor-semantics variant (output extent floor((H + 2*pad - k) / stride) + 1),
// the usual framework convention; lets stride-2 stages halve even extents.
inline Tensor conv2d_floor(const Tensor& x, const Tensor& w, int stride, int pad) {
  detail::conv2d_check(x, w, stride, pad, "conv2d_floor");
  const int h = x.dim(1), wd = x.dim(2), k = w.dim(2);
  const int hn = h + 2 * pad - k, wn = wd + 2 * pad - k;
  if (hn < 0 || wn < 0)
    shape_error("conv2d_floor", "kernel larger than padded input " + shape_str(x.shape()));
  return detail::conv2d_impl(x, w, stride, pad, hn / stride + 1, wn / stride + 1, "conv2d_floor");
}

namespace detail {

inline Shape spatial_shape(const Tensor& x, const char* name, int* c, int* h, int* w) {
  if (x.rank() == 2) {
    *c = 1;
    *h = x.dim(0);
    *w = x.dim(1);
  } else if (x.rank() == 3) {
    *c = x.dim(0);
    *h = x.dim(1);
    *w = x.dim(2);
  } else {
    shape_error(name, "expects rank 2 or 3, got " + shape_str(x.shape()));
  }
  return x.shape();
}

}  // namespace detail

// Nearest-neighbor 2x upsampling: every cell becomes a 2x2 block.
inline Tensor upsample2x(const Tensor& x) {
  int c, h, w;
  detail::spatial_shape(x, "upsample2x", &c, &h, &w);
  const auto xv = x.values();
  std::vector<double> out(std::size_t(c) * 4 * h * w);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        const double v = xv[(std::size_t(ch) * h + y) * w + xx];
        double* base = out.data() + (std::size_t(ch) * 2 * h + 2 * y) * 2 * w + 2 * xx;
        base[0] = v;
        base[1] = v;
        base[2 * std::size_t(w)] = v;
        base[2 * std::size_t(w) + 1] = v;
      }
  Shape out_shape = x.shape();
  out_shape[std::size_t(x.rank() - 2)] = 2 * h;
  out_shape[std::size_t(x.rank() - 1)] = 2 * w;
  const Tensor parents[1] = {x};
  return Tensor::make_op(std::move(out_shape), std::move(out), parents, "upsample2x",
                         [c, h, w](detail::Node& self) {
                           detail::Node& nx = *self.parents[0];
                           if (!nx.requires_grad) return;
                           nx.ensure_grad();
                           for (int ch = 0; ch < c; ++ch)
                             for (int y = 0; y < h; ++y)
                               for (int xx = 0; xx < w; ++xx) {
                                 const double* base =
                                     self.grad.data() +
                                     (std::size_t(ch) * 2 * h + 2 * y) * 2 * w + 2 * xx;
                                 nx.grad[(std::size_t(ch) * h + y) * w + xx] +=
                                     base[0] + base[1] + base[2 * std::size_t(w)] +
                                     base[2 * std::size_t(w) + 1];
                               }
                         });
}

// Mean over non-overlapping 2x2 blocks; spatial extents must be even.
inline Tensor avgpool2x(const Tensor& x) {
  int c, h, w;
  detail::spatial_shape(x, "avgpool2x", &c, &h, &w);
  if (h % 2 || w % 2)
    shape_error("avgpool2x", "spatial extents must be even, got " + shape_str(x.shape()));
  const int ho = h / 2, wo = w / 2;
  const auto xv = x.values();
  std::vector<double> out(std::size_t(c) * ho * wo);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx) {
        const double* base = xv.data() + (std::size_t(ch) * h + 2 * y) * w + 2 * xx;
        out[(std::size_t(ch) * ho + y) * wo + xx] =
            (base[0] + base[1] + base[std::size_t(w)] + base[std::size_t(w) + 1]) / 4.0;
      }
  Shape out_shape = x.shape();
  out_shape[std::size_t(x.rank() - 2)] = ho;
  out_shape[std::size_t(x.rank() - 1)] = wo;
  const Tensor parents[1] = {x};
  return Tensor::make_op(std::move(out_shape), std::move(out), parents, "avgpool2x",
                         [c, h, w, ho, wo](detail::Node& self) {
                           detail::Node& nx = *self.parents[0];
                           if (!nx.requires_grad) return;
                           nx.ensure_grad();
                           for (int ch = 0; ch < c; ++ch)
                             for (int y = 0; y < ho; ++y)
                               for (int xx = 0; xx < wo; ++xx) {
                                 const double g =
                                     self.grad[(std::size_t(ch) * ho + y) * wo + xx] / 4.0;
                                 double* base = nx.grad.data() +
                                                (std::size_t(ch) * h + 2 * y) * w + 2 * xx;
                                 base[0] += g;
                                 base[1] += g;
                                 base[std::size_t(w)] += g;
                                 base[std::size_t(w) + 1] += g;
                               }
                         });
}

}  // namespace gem
