#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gem/errors.hpp"

namespace gem {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) r += "x";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

[[noreturn]] inline void shape_error(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "";

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

inline bool& tape_enabled() {
  thread_local bool on = true;
  return on;
}

}  // namespace detail

// Disables tape recording in scope; used for inference and the numeric
// side of gradient checking.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::tape_enabled()) { detail::tape_enabled() = false; }
  ~NoGradGuard() { detail::tape_enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense fp64 array with reverse-mode differentiation. A Tensor is a cheap
// handle onto a tape node; ops are free functions returning new nodes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (numel(shape) != std::int64_t(values.size()))
      shape_error("Tensor", "shape " + shape_str(shape) + " holds " +
                                std::to_string(numel(shape)) + " values, got " +
                                std::to_string(values.size()));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    n->op = "leaf";
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(std::size_t(numel(shape)), 0.0);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, double value) {
    std::vector<double> v(std::size_t(numel(shape)), value);
    return from(std::move(shape), std::move(v));
  }

  static Tensor scalar(double value) { return from({1}, {value}); }

  // Used by op implementations to attach a tape node.
  static Tensor make_op(Shape shape, std::vector<double> value,
                        std::span<const Tensor> parents, const char* op,
                        std::function<void(detail::Node&)> backward) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    bool rg = false;
    if (detail::tape_enabled()) {
      for (const Tensor& p : parents) rg = rg || p.requires_grad();
    }
    n->requires_grad = rg;
    if (rg) {
      n->parents.reserve(parents.size());
      for (const Tensor& p : parents) n->parents.push_back(p.n_);
      n->backward = std::move(backward);
    }
    return Tensor(std::move(n));
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return int(n_->shape.size()); }
  int dim(int i) const { return n_->shape[std::size_t(i)]; }
  std::int64_t size() const { return numel(n_->shape); }
  bool requires_grad() const { return n_ && n_->requires_grad; }

  std::span<const double> values() const { return n_->value; }
  std::span<double> mutable_values() { return n_->value; }
  std::span<const double> grad() const { return n_->grad; }

  double item() const {
    if (size() != 1) shape_error("item", "expected a scalar, got " + shape_str(shape()));
    return n_->value[0];
  }

  double at(std::initializer_list<int> idx) const {
    std::int64_t flat = 0;
    std::size_t d = 0;
    for (int i : idx) flat = flat * n_->shape[d++] + i;
    return n_->value[std::size_t(flat)];
  }

  void zero_grad() {
    if (n_) n_->grad.assign(n_->value.size(), 0.0);
  }

  // Reverse-mode sweep from a scalar root. Gradients accumulate, so leaves
  // keep their sums across calls until zero_grad.
  void backward() {
    if (!n_) shape_error("backward", "empty tensor");
    if (size() != 1) shape_error("backward", "root must be scalar, got " + shape_str(shape()));
    if (!n_->requires_grad) return;

    std::vector<detail::Node*> order;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    std::unordered_set<detail::Node*> seen;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& top = stack.back();
      if (top.second < top.first->parents.size()) {
        detail::Node* p = top.first->parents[top.second++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(top.first);
        stack.pop_back();
      }
    }
    n_->ensure_grad();
    n_->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      (*it)->ensure_grad();
      if ((*it)->backward) (*it)->backward(**it);
    }
  }

  std::shared_ptr<detail::Node> node() const { return n_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}
  std::shared_ptr<detail::Node> n_;
};

inline bool all_finite(const Tensor& t) {
  for (double v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// broadcasting (numpy-style, right-aligned)

namespace detail {

inline std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 0);
  std::int64_t acc = 1;
  for (int i = int(s.size()) - 1; i >= 0; --i) {
    st[std::size_t(i)] = acc;
    acc *= s[std::size_t(i)];
  }
  return st;
}

struct BcastPlan {
  Shape out;
  std::vector<std::int64_t> sa, sb;  // strides per out dim, 0 where broadcast
  bool same = false;
};

inline BcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
  BcastPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const int ra = int(a.size()), rb = int(b.size()), ro = std::max(ra, rb);
  p.out.resize(std::size_t(ro));
  p.sa.assign(std::size_t(ro), 0);
  p.sb.assign(std::size_t(ro), 0);
  const auto stra = row_major_strides(a);
  const auto strb = row_major_strides(b);
  for (int i = 0; i < ro; ++i) {
    const int ia = i - (ro - ra), ib = i - (ro - rb);
    const int ea = ia >= 0 ? a[std::size_t(ia)] : 1;
    const int eb = ib >= 0 ? b[std::size_t(ib)] : 1;
    if (ea != eb && ea != 1 && eb != 1)
      shape_error(op, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    p.out[std::size_t(i)] = std::max(ea, eb);
    if (ia >= 0 && ea != 1) p.sa[std::size_t(i)] = stra[std::size_t(ia)];
    if (ib >= 0 && eb != 1) p.sb[std::size_t(i)] = strb[std::size_t(ib)];
  }
  return p;
}

template <class F>
inline void bcast_for_each(const BcastPlan& p, F&& f) {
  const int r = int(p.out.size());
  const std::int64_t total = numel(p.out);
  std::vector<int> idx(std::size_t(r), 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t io = 0; io < total; ++io) {
    f(io, ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      ++idx[std::size_t(d)];
      ia += p.sa[std::size_t(d)];
      ib += p.sb[std::size_t(d)];
      if (idx[std::size_t(d)] < p.out[std::size_t(d)]) break;
      ia -= std::int64_t(p.out[std::size_t(d)]) * p.sa[std::size_t(d)];
      ib -= std::int64_t(p.out[std::size_t(d)]) * p.sb[std::size_t(d)];
      idx[std::size_t(d)] = 0;
    }
  }
}

// Index mapping for one operand of a broadcast op. Nearly every broadcast in
// the model maps a flat output index as (io / tail) % size: full tensors,
// scalars, trailing blocks (biases), and leading blocks (channel gates).
struct AxisMap {
  enum Kind { kFull, kBlock, kOdometer } kind = kFull;
  std::int64_t tail = 1;
  std::int64_t size = 1;

  std::int64_t operator()(std::int64_t io) const {
    return kind == kFull ? io : (io / tail) % size;
  }
};

inline AxisMap axis_map(const Shape& operand, const Shape& out) {
  AxisMap m;
  if (operand == out) {
    m.kind = AxisMap::kFull;
    return m;
  }
  const int ro = int(out.size()), r = int(operand.size());
  int first = -1, last = -1;
  for (int i = 0; i < ro; ++i) {
    const int io = i - (ro - r);
    const int e = io >= 0 ? operand[std::size_t(io)] : 1;
    if (e != 1) {
      if (first < 0) first = i;
      last = i;
      if (e != out[std::size_t(i)]) {
        m.kind = AxisMap::kOdometer;
        return m;
      }
    }
  }
  if (first < 0) {  // scalar operand
    m.kind = AxisMap::kBlock;
    m.tail = 1;
    m.size = 1;
    return m;
  }
  // reject broadcast holes inside the run (out extent > 1 where operand is 1)
  std::int64_t run = 1;
  for (int i = first; i <= last; ++i) {
    const int io = i - (ro - r);
    const int e = io >= 0 ? operand[std::size_t(io)] : 1;
    if (e == 1 && out[std::size_t(i)] != 1) {
      m.kind = AxisMap::kOdometer;
      return m;
    }
    run *= out[std::size_t(i)];
  }
  std::int64_t tail = 1;
  for (int i = last + 1; i < ro; ++i) tail *= out[std::size_t(i)];
  m.kind = AxisMap::kBlock;
  m.tail = tail;
  m.size = run;
  return m;
}

// Visits (io, ia, ib) with one full operand and one block operand without any
// per-element division; f(io, full_idx, block_idx) where full_idx == io.
template <class F>
inline void block_for_each(std::int64_t total, const AxisMap& block, F&& f) {
  const std::int64_t tail = block.tail, size = block.size;
  std::int64_t io = 0;
  while (io < total) {
    for (std::int64_t mid = 0; mid < size; ++mid)
      for (std::int64_t t = 0; t < tail; ++t, ++io) f(io, mid);
  }
}

// fv(a, b) -> out; da/db(a, b, out) -> partial derivative w.r.t. a/b
template <class FV, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, FV fv, DA da, DB db) {
  const BcastPlan plan = broadcast_plan(a.shape(), b.shape(), name);
  const Shape& out_shape = plan.same ? a.shape() : plan.out;
  const AxisMap map_a = plan.same ? AxisMap{} : axis_map(a.shape(), out_shape);
  const AxisMap map_b = plan.same ? AxisMap{} : axis_map(b.shape(), out_shape);
  // fast path: one operand covers the output, the other is a block
  const int mode = plan.same ? 0
                   : (map_a.kind == AxisMap::kFull && map_b.kind == AxisMap::kBlock) ? 1
                   : (map_b.kind == AxisMap::kFull && map_a.kind == AxisMap::kBlock) ? 2
                                                                                     : 3;
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(std::size_t(numel(out_shape)));
  if (mode == 0) {
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fv(av[i], bv[i]);
  } else if (mode == 1) {
    block_for_each(std::int64_t(out.size()), map_b, [&](std::int64_t io, std::int64_t ib) {
      out[std::size_t(io)] = fv(av[std::size_t(io)], bv[std::size_t(ib)]);
    });
  } else if (mode == 2) {
    block_for_each(std::int64_t(out.size()), map_a, [&](std::int64_t io, std::int64_t ia) {
      out[std::size_t(io)] = fv(av[std::size_t(ia)], bv[std::size_t(io)]);
    });
  } else {
    bcast_for_each(plan, [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
      out[std::size_t(io)] = fv(av[std::size_t(ia)], bv[std::size_t(ib)]);
    });
  }
  const Tensor parents[2] = {a, b};
  return Tensor::make_op(
      Shape(out_shape), std::move(out), parents, name,
      [plan, map_a, map_b, mode, da, db](detail::Node& self) {
        detail::Node& na = *self.parents[0];
        detail::Node& nb = *self.parents[1];
        const bool ga = na.requires_grad, gb = nb.requires_grad;
        if (ga) na.ensure_grad();
        if (gb) nb.ensure_grad();
        if (mode == 0) {
          const std::size_t n = self.value.size();
          for (std::size_t i = 0; i < n; ++i) {
            const double g = self.grad[i];
            if (ga) na.grad[i] += g * da(na.value[i], nb.value[i], self.value[i]);
            if (gb) nb.grad[i] += g * db(na.value[i], nb.value[i], self.value[i]);
          }
        } else if (mode == 1) {
          block_for_each(std::int64_t(self.value.size()), map_b,
                         [&](std::int64_t io, std::int64_t ib) {
                           const double g = self.grad[std::size_t(io)];
                           const double x = na.value[std::size_t(io)];
                           const double y = nb.value[std::size_t(ib)];
                           const double o = self.value[std::size_t(io)];
                           if (ga) na.grad[std::size_t(io)] += g * da(x, y, o);
                           if (gb) nb.grad[std::size_t(ib)] += g * db(x, y, o);
                         });
        } else if (mode == 2) {
          block_for_each(std::int64_t(self.value.size()), map_a,
                         [&](std::int64_t io, std::int64_t ia) {
                           const double g = self.grad[std::size_t(io)];
                           const double x = na.value[std::size_t(ia)];
                           const double y = nb.value[std::size_t(io)];
                           const double o = self.value[std::size_t(io)];
                           if (ga) na.grad[std::size_t(ia)] += g * da(x, y, o);
                           if (gb) nb.grad[std::size_t(io)] += g * db(x, y, o);
                         });
        } else {
          bcast_for_each(plan, [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
            const double g = self.grad[std::size_t(io)];
            const double x = na.value[std::size_t(ia)];
            const double y = nb.value[std::size_t(ib)];
            const double o = self.value[std::size_t(io)];
            if (ga) na.grad[std::size_t(ia)] += g * da(x, y, o);
            if (gb) nb.grad[std::size_t(ib)] += g * db(x, y, o);
          });
        }
      });
}

// fv(x) -> out; dx(x, out) -> derivative
template <class FV, class DX>
Tensor unary_op(const Tensor& x, const char* name, FV fv, DX dx) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fv(xv[i]);
  const Tensor parents[1] = {x};
  return Tensor::make_op(x.shape(), std::move(out), parents, name,
                         [dx](detail::Node& self) {
                           detail::Node& nx = *self.parents[0];
                           if (!nx.requires_grad) return;
                           nx.ensure_grad();
                           for (std::size_t i = 0; i < self.value.size(); ++i)
                             nx.grad[i] += self.grad[i] * dx(nx.value[i], self.value[i]);
                         });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// pointwise ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary_op(
      x, "add_scalar", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& x, double c) {
  return detail::unary_op(
      x, "mul_scalar", [c](double v) { return v * c; }, [c](double, double) { return c; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double o) { return o * (1.0 - o); });
}

inline Tensor exp_op(const Tensor& x) {
  return detail::unary_op(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double o) { return o; });
}

inline Tensor log_op(const Tensor& x) {
  return detail::unary_op(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor sqrt_op(const Tensor& x) {
  return detail::unary_op(
      x, "sqrt", [](double v) { return std::sqrt(v); },
      [](double, double o) { return 0.5 / o; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// matmul and shape ops

namespace detail {
constexpr std::int64_t kParallelWork = 1 << 16;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    shape_error("matmul", "expects rank-2 operands, got " + shape_str(a.shape()) + " @ " +
                              shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    shape_error("matmul", "inner extents differ: " + shape_str(a.shape()) + " @ " +
                              shape_str(b.shape()));
  const double* av = a.values().data();
  const double* bv = b.values().data();
  std::vector<double> out(std::size_t(m) * n, 0.0);
  double* ov = out.data();
  const std::int64_t work = std::int64_t(m) * k * n;
#pragma omp parallel for schedule(static) if (work > detail::kParallelWork)
  for (int i = 0; i < m; ++i) {
    double* orow = ov + std::size_t(i) * n;
    const double* arow = av + std::size_t(i) * k;
    for (int l = 0; l < k; ++l) {
      const double ail = arow[l];
      const double* brow = bv + std::size_t(l) * n;
      for (int j = 0; j < n; ++j) orow[j] += ail * brow[j];
    }
  }
  const Tensor parents[2] = {a, b};
  return Tensor::make_op(
      {m, n}, std::move(out), parents, "matmul", [m, k, n, work](detail::Node& self) {
        detail::Node& na = *self.parents[0];
        detail::Node& nb = *self.parents[1];
        const double* g = self.grad.data();
        if (na.requires_grad) {
          na.ensure_grad();
          double* ga = na.grad.data();
          const double* bv = nb.value.data();
#pragma omp parallel for schedule(static) if (work > detail::kParallelWork)
          for (int i = 0; i < m; ++i) {
            const double* grow = g + std::size_t(i) * n;
            double* garow = ga + std::size_t(i) * k;
            for (int l = 0; l < k; ++l) {
              const double* brow = bv + std::size_t(l) * n;
              // four lanes with a fixed combination order keep the reduction
              // deterministic while breaking the dependency chain
              double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
              int j = 0;
              for (; j + 4 <= n; j += 4) {
                a0 += grow[j] * brow[j];
                a1 += grow[j + 1] * brow[j + 1];
                a2 += grow[j + 2] * brow[j + 2];
                a3 += grow[j + 3] * brow[j + 3];
              }
              double acc = (a0 + a1) + (a2 + a3);
              for (; j < n; ++j) acc += grow[j] * brow[j];
              garow[l] += acc;
            }
          }
        }
        if (nb.requires_grad) {
          nb.ensure_grad();
          double* gb = nb.grad.data();
          const double* av = na.value.data();
          // dB = A^T * g; transposing A up front keeps every access streaming
          std::vector<double> at(std::size_t(m) * k);
          for (int i = 0; i < m; ++i)
            for (int l = 0; l < k; ++l) at[std::size_t(l) * m + i] = av[std::size_t(i) * k + l];
#pragma omp parallel for schedule(static) if (work > detail::kParallelWork)
          for (int l = 0; l < k; ++l) {
            double* gbrow = gb + std::size_t(l) * n;
            const double* atrow = at.data() + std::size_t(l) * m;
            for (int i = 0; i < m; ++i) {
              const double ail = atrow[i];
              const double* grow = g + std::size_t(i) * n;
              for (int j = 0; j < n; ++j) gbrow[j] += ail * grow[j];
            }
          }
        }
      });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) shape_error("transpose", "expects rank 2, got " + shape_str(x.shape()));
  const int r = x.dim(0), c = x.dim(1);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[std::size_t(j) * r + i] = xv[std::size_t(i) * c + j];
  const Tensor parents[1] = {x};
  return Tensor::make_op({c, r}, std::move(out), parents, "transpose",
                         [r, c](detail::Node& self) {
                           detail::Node& nx = *self.parents[0];
                           if (!nx.requires_grad) return;
                           nx.ensure_grad();
                           for (int j = 0; j < c; ++j)
                             for (int i = 0; i < r; ++i)
                               nx.grad[std::size_t(i) * c + j] +=
                                   self.grad[std::size_t(j) * r + i];
                         });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    shape_error("reshape", shape_str(x.shape()) + " -> " + shape_str(shape) +
                               " changes element count");
  std::vector<double> out(x.values().begin(), x.values().end());
  const Tensor parents[1] = {x};
  return Tensor::make_op(std::move(shape), std::move(out), parents, "reshape",
                         [](detail::Node& self) {
                           detail::Node& nx = *self.parents[0];
                           if (!nx.requires_grad) return;
                           nx.ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             nx.grad[i] += self.grad[i];
                         });
}

inline Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const int rank = parts[0].rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) shape_error("concat", "axis out of range");
  Shape out_shape = parts[0].shape();
  std::int64_t axis_total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != rank) shape_error("concat", "rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis && p.dim(d) != out_shape[std::size_t(d)])
        shape_error("concat", "extent mismatch at axis " + std::to_string(d) + ": " +
                                  shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    axis_total += p.dim(axis);
  }
  out_shape[std::size_t(axis)] = int(axis_total);

  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[std::size_t(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= out_shape[std::size_t(d)];

  std::vector<double> out(std::size_t(numel(out_shape)));
  std::vector<std::int64_t> offsets;  // start of each part along axis
  {
    std::int64_t off = 0;
    for (const Tensor& p : parts) {
      offsets.push_back(off);
      const auto pv = p.values();
      const std::int64_t mid = p.dim(axis);
      for (std::int64_t o = 0; o < outer; ++o)
        std::copy_n(pv.data() + o * mid * inner, std::size_t(mid * inner),
                    out.data() + (o * axis_total + off) * inner);
      off += mid;
    }
  }
  std::vector<std::int64_t> mids;
  for (const Tensor& p : parts) mids.push_back(p.dim(axis));
  return Tensor::make_op(
      std::move(out_shape), std::move(out), parts, "concat",
      [outer, inner, axis_total, offsets, mids](detail::Node& self) {
        for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
          detail::Node& np = *self.parents[pi];
          if (!np.requires_grad) continue;
          np.ensure_grad();
          const std::int64_t mid = mids[pi], off = offsets[pi];
          for (std::int64_t o = 0; o < outer; ++o) {
            const double* g = self.grad.data() + (o * axis_total + off) * inner;
            double* gp = np.grad.data() + o * mid * inner;
            for (std::int64_t i = 0; i < mid * inner; ++i) gp[i] += g[i];
          }
        }
      });
}

inline Tensor concat(std::initializer_list<Tensor> parts, int axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
  if (x.rank() != 2) shape_error("slice_cols", "expects rank 2, got " + shape_str(x.shape()));
  const int r = x.dim(0), c = x.dim(1);
  if (c0 < 0 || c1 > c || c0 >= c1)
    shape_error("slice_cols", "range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                                  ") invalid for " + shape_str(x.shape()));
  const int w = c1 - c0;
  const auto xv = x.values();
  std::vector<double> out(std::size_t(r) * w);
  for (int i = 0; i < r; ++i)
    std::copy_n(xv.data() + std::size_t(i) * c + c0, std::size_t(w),
                out.data() + std::size_t(i) * w);
  const Tensor parents[1] = {x};
  return Tensor::make_op({r, w}, std::move(out), parents, "slice_cols",
                         [r, c, c0, w](detail::Node& self) {
                           detail::Node& nx = *self.parents[0];
                           if (!nx.requires_grad) return;
                           nx.ensure_grad();
                           for (int i = 0; i < r; ++i)
                             for (int j = 0; j < w; ++j)
                               nx.grad[std::size_t(i) * c + c0 + j] +=
                                   self.grad[std::size_t(i) * w + j];
                         });
}

// Row gather; also the embedding lookup. Gradient scatters into the table.
inline Tensor gather_rows(const Tensor& x, std::vector<int> ids) {
  if (x.rank() != 2) shape_error("gather_rows", "expects rank 2, got " + shape_str(x.shape()));
  const int r = x.dim(0), c = x.dim(1);
  for (int id : ids)
    if (id < 0 || id >= r)
      shape_error("gather_rows",
                  "id " + std::to_string(id) + " out of range [0, " + std::to_string(r) + ")");
  const auto xv = x.values();
  const int n_ids = int(ids.size());
  std::vector<double> out(ids.size() * std::size_t(c));
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(xv.data() + std::size_t(ids[i]) * c, std::size_t(c), out.data() + i * c);
  const Tensor parents[1] = {x};
  return Tensor::make_op({n_ids, c}, std::move(out), parents, "gather_rows",
                         [ids = std::move(ids), c](detail::Node& self) {
                           detail::Node& nx = *self.parents[0];
                           if (!nx.requires_grad) return;
                           nx.ensure_grad();
                           for (std::size_t i = 0; i < ids.size(); ++i) {
                             const double* g = self.grad.data() + i * c;
                             double* gx = nx.grad.data() + std::size_t(ids[i]) * c;
                             for (int j = 0; j < c; ++j) gx[j] += g[j];
                           }
                         });
}

inline Tensor embed(const Tensor& table, std::vector<int> ids) {
  if (table.rank() != 2) shape_error("embed", "table must be rank 2, got " + shape_str(table.shape()));
  for (int id : ids)
    if (id < 0 || id >= table.dim(0))
      shape_error("embed", "token id " + std::to_string(id) + " out of range [0, " +
                               std::to_string(table.dim(0)) + ")");
  return gather_rows(table, std::move(ids));
}

inline Tensor take_diag(const Tensor& x) {
  if (x.rank() != 2 || x.dim(0) != x.dim(1))
    shape_error("take_diag", "expects a square matrix, got " + shape_str(x.shape()));
  const int k = x.dim(0);
  const auto xv = x.values();
  std::vector<double> out(std::size_t(k), 0.0);
  for (int i = 0; i < k; ++i) out[std::size_t(i)] = xv[std::size_t(i) * k + i];
  const Tensor parents[1] = {x};
  return Tensor::make_op({k}, std::move(out), parents, "take_diag",
                         [k](detail::Node& self) {
                           detail::Node& nx = *self.parents[0];
                           if (!nx.requires_grad) return;
                           nx.ensure_grad();
                           for (int i = 0; i < k; ++i)
                             nx.grad[std::size_t(i) * k + i] += self.grad[std::size_t(i)];
                         });
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum_all(const Tensor& x) {
  const auto xv = x.values();
  double acc = 0.0;
  for (double v : xv) acc += v;
  const Tensor parents[1] = {x};
  return Tensor::make_op({1}, {acc}, parents, "sum_all", [](detail::Node& self) {
    detail::Node& nx = *self.parents[0];
    if (!nx.requires_grad) return;
    nx.ensure_grad();
    const double g = self.grad[0];
    for (double& gv : nx.grad) gv += g;
  });
}

inline Tensor mean_all(const Tensor& x) { return mul_scalar(sum_all(x), 1.0 / double(x.size())); }

inline int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    shape_error(op, "axis " + std::to_string(axis) + " out of range for rank " +
                        std::to_string(rank));
  return axis;
}

inline Tensor sum_axis(const Tensor& x, int axis, bool keepdim = true) {
  axis = normalize_axis(axis, x.rank(), "sum_axis");
  const Shape& s = x.shape();
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[std::size_t(d)];
  for (int d = axis + 1; d < x.rank(); ++d) inner *= s[std::size_t(d)];
  const std::int64_t mid = s[std::size_t(axis)];

  const auto xv = x.values();
  std::vector<double> out(std::size_t(outer * inner), 0.0);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t m = 0; m < mid; ++m) {
      const double* src = xv.data() + (o * mid + m) * inner;
      double* dst = out.data() + o * inner;
      for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }

  Shape out_shape;
  for (int d = 0; d < x.rank(); ++d) {
    if (d == axis) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(s[std::size_t(d)]);
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  const Tensor parents[1] = {x};
  return Tensor::make_op(std::move(out_shape), std::move(out), parents, "sum_axis",
                         [outer, mid, inner](detail::Node& self) {
                           detail::Node& nx = *self.parents[0];
                           if (!nx.requires_grad) return;
                           nx.ensure_grad();
                           for (std::int64_t o = 0; o < outer; ++o)
                             for (std::int64_t m = 0; m < mid; ++m) {
                               const double* g = self.grad.data() + o * inner;
                               double* gx = nx.grad.data() + (o * mid + m) * inner;
                               for (std::int64_t i = 0; i < inner; ++i) gx[i] += g[i];
                             }
                         });
}

inline Tensor mean_axis(const Tensor& x, int axis, bool keepdim = true) {
  const int mid = x.dim(normalize_axis(axis, x.rank(), "mean_axis"));
  return mul_scalar(sum_axis(x, axis, keepdim), 1.0 / double(mid));
}

// Per-slice max as a constant (no gradient); the softmax shift.
inline Tensor max_axis_detached(const Tensor& x, int axis) {
  axis = normalize_axis(axis, x.rank(), "max_axis");
  const Shape& s = x.shape();
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[std::size_t(d)];
  for (int d = axis + 1; d < x.rank(); ++d) inner *= s[std::size_t(d)];
  const std::int64_t mid = s[std::size_t(axis)];
  const auto xv = x.values();
  std::vector<double> out(std::size_t(outer * inner), -std::numeric_limits<double>::infinity());
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t m = 0; m < mid; ++m)
      for (std::int64_t i = 0; i < inner; ++i)
        out[std::size_t(o * inner + i)] =
            std::max(out[std::size_t(o * inner + i)], xv[std::size_t((o * mid + m) * inner + i)]);
  Shape out_shape = s;
  out_shape[std::size_t(axis)] = 1;
  return Tensor::from(std::move(out_shape), std::move(out));
}

// ---------------------------------------------------------------------------
// normalizations

namespace detail {

// Fused path for the common case: rank-2 input, reduction over columns.
// dx = y * (g - sum_j g_j y_j) per row.
inline Tensor softmax_rows(const Tensor& x) {
  const int r = x.dim(0), c = x.dim(1);
  const double* xv = x.values().data();
  std::vector<double> out(std::size_t(r) * c);
  for (int i = 0; i < r; ++i) {
    const double* row = xv + std::size_t(i) * c;
    double* orow = out.data() + std::size_t(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    const double inv = 1.0 / z;
    for (int j = 0; j < c; ++j) orow[j] *= inv;
  }
  const Tensor parents[1] = {x};
  return Tensor::make_op({r, c}, std::move(out), parents, "softmax",
                         [r, c](detail::Node& self) {
                           detail::Node& nx = *self.parents[0];
                           if (!nx.requires_grad) return;
                           nx.ensure_grad();
                           for (int i = 0; i < r; ++i) {
                             const double* y = self.value.data() + std::size_t(i) * c;
                             const double* g = self.grad.data() + std::size_t(i) * c;
                             double* gx = nx.grad.data() + std::size_t(i) * c;
                             double dot = 0.0;
                             for (int j = 0; j < c; ++j) dot += g[j] * y[j];
                             for (int j = 0; j < c; ++j) gx[j] += y[j] * (g[j] - dot);
                           }
                         });
}

}  // namespace detail

// Max-subtracted softmax along an axis. The shift is detached, which is exact:
// softmax is invariant to per-slice shifts.
inline Tensor softmax(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank(), "softmax");
  if (x.rank() == 2 && ax == 1) return detail::softmax_rows(x);
  const Tensor m = max_axis_detached(x, ax);
  const Tensor e = exp_op(sub(x, m));
  const Tensor s = sum_axis(e, ax, true);
  return div(e, s);
}

// Fused per-row layer normalization with learnable gain and shift:
// y = gamma * (x - mean) / sqrt(var + eps) + beta, statistics per row.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              double eps) {
  if (x.rank() != 2) shape_error("layer_norm", "expects rank 2, got " + shape_str(x.shape()));
  const int r = x.dim(0), c = x.dim(1);
  if (gamma.size() != c || beta.size() != c)
    shape_error("layer_norm", "gain/shift must have " + std::to_string(c) + " entries");
  const double* xv = x.values().data();
  const double* gv = gamma.values().data();
  const double* bv = beta.values().data();
  std::vector<double> out(std::size_t(r) * c);
  std::vector<double> mu(std::size_t(r), 0.0);
  std::vector<double> inv_sigma(std::size_t(r), 0.0);
  for (int i = 0; i < r; ++i) {
    const double* row = xv + std::size_t(i) * c;
    double m = 0.0;
    for (int j = 0; j < c; ++j) m += row[j];
    m /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (row[j] - m) * (row[j] - m);
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    mu[std::size_t(i)] = m;
    inv_sigma[std::size_t(i)] = is;
    double* orow = out.data() + std::size_t(i) * c;
    for (int j = 0; j < c; ++j) orow[j] = gv[j] * (row[j] - m) * is + bv[j];
  }
  const Tensor parents[3] = {x, gamma, beta};
  return Tensor::make_op(
      {r, c}, std::move(out), parents, "layer_norm",
      [r, c, mu = std::move(mu), inv_sigma = std::move(inv_sigma)](detail::Node& self) {
        detail::Node& nx = *self.parents[0];
        detail::Node& ng = *self.parents[1];
        detail::Node& nb = *self.parents[2];
        const double* xv = nx.value.data();
        const double* gv = ng.value.data();
        if (nx.requires_grad) nx.ensure_grad();
        if (ng.requires_grad) ng.ensure_grad();
        if (nb.requires_grad) nb.ensure_grad();
        std::vector<double> xhat(std::size_t(c), 0.0);
        for (int i = 0; i < r; ++i) {
          const double* g = self.grad.data() + std::size_t(i) * c;
          const double* row = xv + std::size_t(i) * c;
          const double m = mu[std::size_t(i)];
          const double is = inv_sigma[std::size_t(i)];
          for (int j = 0; j < c; ++j) xhat[std::size_t(j)] = (row[j] - m) * is;
          if (ng.requires_grad)
            for (int j = 0; j < c; ++j) ng.grad[std::size_t(j)] += g[j] * xhat[std::size_t(j)];
          if (nb.requires_grad)
            for (int j = 0; j < c; ++j) nb.grad[std::size_t(j)] += g[j];
          if (nx.requires_grad) {
            double mean_gh = 0.0, mean_ghx = 0.0;
            for (int j = 0; j < c; ++j) {
              const double gh = g[j] * gv[j];
              mean_gh += gh;
              mean_ghx += gh * xhat[std::size_t(j)];
            }
            mean_gh /= c;
            mean_ghx /= c;
            double* gx = nx.grad.data() + std::size_t(i) * c;
            for (int j = 0; j < c; ++j)
              gx[j] += is * (g[j] * gv[j] - mean_gh - xhat[std::size_t(j)] * mean_ghx);
          }
        }
      });
}

// Whole-instance normalization: (x - mean) / sqrt(var + eps), population
// statistics over every element.
inline Tensor instance_norm(const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("instance_norm: eps must be > 0");
  const Tensor mu = mean_all(x);
  const Tensor xc = sub(x, mu);
  const Tensor var = mean_all(mul(xc, xc));
  return div(xc, sqrt_op(add_scalar(var, eps)));
}

}  // namespace gem
