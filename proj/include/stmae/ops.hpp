#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "stmae/error.hpp"
#include "stmae/tensor.hpp"

// Differentiable operations over Tensor<T>.
//
// Broadcasting is limited to scalar scaling and bias-add over the last axis.
// All reductions accumulate in a fixed row-major order, so results are
// bit-reproducible for identical inputs.
namespace stmae {

namespace detail {

template <class T>
GradTape<T>* tape_for(std::initializer_list<const Tensor<T>*> inputs) {
  GradTape<T>* tape = GradTape<T>::active();
  if (!tape) return nullptr;
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

template <class T>
void require_rank2(const Tensor<T>& x, const char* op) {
  require(x.rank() == 2, std::string(op) + ": expected a matrix, got " + shape_str(x.shape()));
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

}  // namespace detail

// c[m,n] = a[m,k] . b[k,n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  detail::require(b.dim(0) == k, "matmul: inner extents disagree, " + shape_str(a.shape()) +
                                     " x " + shape_str(b.shape()));
  Tensor<T> c({m, n});
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* pc = c.ptr();
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  if (auto* tape = detail::tape_for({&a, &b})) {
    c.set_requires_grad();
    tape->record("matmul", [a, b, c, m, k, n]() mutable {
      if (!c.has_grad()) return;
      const T* g = c.grad().data();
      if (a.requires_grad()) {
        T* ga = a.mutable_grad().data();
        const T* pb = b.ptr();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            T acc{0};
            const T* grow = g + i * n;
            const T* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * k + p] += acc;
          }
        }
      }
      if (b.requires_grad()) {
        T* gb = b.mutable_grad().data();
        const T* pa = a.ptr();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const T aip = pa[i * k + p];
            T* gbrow = gb + p * n;
            const T* grow = g + i * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
          }
        }
      }
    });
  }
  return c;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> c(a.shape());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] + b[i];
  if (auto* tape = detail::tape_for({&a, &b})) {
    c.set_requires_grad();
    tape->record("add", [a, b, c]() mutable {
      if (!c.has_grad()) return;
      auto g = c.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return c;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> c(a.shape());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] - b[i];
  if (auto* tape = detail::tape_for({&a, &b})) {
    c.set_requires_grad();
    tape->record("sub", [a, b, c]() mutable {
      if (!c.has_grad()) return;
      auto g = c.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return c;
}

// Elementwise product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> c(a.shape());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] * b[i];
  if (auto* tape = detail::tape_for({&a, &b})) {
    c.set_requires_grad();
    tape->record("mul", [a, b, c]() mutable {
      if (!c.has_grad()) return;
      auto g = c.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return c;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * s;
  if (auto* tape = detail::tape_for({&x})) {
    y.set_requires_grad();
    tape->record("scale", [x, y, s]() mutable {
      if (!y.has_grad()) return;
      auto g = y.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
    });
  }
  return y;
}

// y[..., j] = x[..., j] + bias[j]
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t d = x.cols();
  detail::require(bias.size() == d, "add_bias: bias of " + shape_str(bias.shape()) +
                                        " does not match last axis of " + shape_str(x.shape()));
  const std::size_t r = x.rows();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < d; ++j) y[i * d + j] = x[i * d + j] + bias[j];
  if (auto* tape = detail::tape_for({&x, &bias})) {
    y.set_requires_grad();
    tape->record("add_bias", [x, bias, y, r, d]() mutable {
      if (!y.has_grad()) return;
      auto g = y.grad();
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_rank2(x, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor<T> y({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = x[i * n + j];
  if (auto* tape = detail::tape_for({&x})) {
    y.set_requires_grad();
    tape->record("transpose", [x, y, m, n]() mutable {
      if (!y.has_grad()) return;
      auto g = y.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
    });
  }
  return y;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(shape_numel(shape) == x.size(),
                  "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<T> y(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (auto* tape = detail::tape_for({&x})) {
    y.set_requires_grad();
    tape->record("reshape", [x, y]() mutable {
      if (!y.has_grad()) return;
      auto g = y.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

// Rows of a matrix selected by index; repeated indices are allowed and their
// gradients accumulate.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> idx) {
  detail::require_rank2(x, "gather_rows");
  if (idx.empty()) throw DimensionError("gather_rows: empty index set");
  const std::size_t n = x.dim(0), d = x.dim(1);
  for (std::size_t i : idx) {
    if (i >= n) {
      throw std::out_of_range("gather_rows: index " + std::to_string(i) +
                              " out of range for " + std::to_string(n) + " rows");
    }
  }
  Tensor<T> y({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(x.ptr() + idx[r] * d, d, y.ptr() + r * d);
  if (auto* tape = detail::tape_for({&x})) {
    y.set_requires_grad();
    std::vector<std::size_t> rows(idx.begin(), idx.end());
    tape->record("gather_rows", [x, y, rows, d]() mutable {
      if (!y.has_grad()) return;
      auto g = y.grad();
      auto gx = x.mutable_grad();
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t j = 0; j < d; ++j) gx[rows[r] * d + j] += g[r * d + j];
    });
  }
  return y;
}

// Copy of `base` with rows idx[r] replaced by src[r]. Indices must be distinct.
template <class T>
Tensor<T> scatter_rows(const Tensor<T>& base, std::span<const std::size_t> idx,
                       const Tensor<T>& src) {
  detail::require_rank2(base, "scatter_rows");
  detail::require_rank2(src, "scatter_rows");
  const std::size_t n = base.dim(0), d = base.dim(1);
  detail::require(src.dim(0) == idx.size() && src.dim(1) == d,
                  "scatter_rows: source " + shape_str(src.shape()) + " does not match " +
                      std::to_string(idx.size()) + " indices into " + shape_str(base.shape()));
  std::vector<char> hit(n, 0);
  for (std::size_t i : idx) {
    if (i >= n) {
      throw std::out_of_range("scatter_rows: index " + std::to_string(i) +
                              " out of range for " + std::to_string(n) + " rows");
    }
    if (hit[i]) throw ContractError("scatter_rows: duplicate index " + std::to_string(i));
    hit[i] = 1;
  }
  Tensor<T> y = base.clone();
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(src.ptr() + r * d, d, y.ptr() + idx[r] * d);
  if (auto* tape = detail::tape_for({&base, &src})) {
    y.set_requires_grad();
    std::vector<std::size_t> rows(idx.begin(), idx.end());
    tape->record("scatter_rows", [base, src, y, rows, hit, d, n]() mutable {
      if (!y.has_grad()) return;
      auto g = y.grad();
      if (base.requires_grad()) {
        auto gb = base.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) {
          if (hit[i]) continue;
          for (std::size_t j = 0; j < d; ++j) gb[i * d + j] += g[i * d + j];
        }
      }
      if (src.requires_grad()) {
        auto gs = src.mutable_grad();
        for (std::size_t r = 0; r < rows.size(); ++r)
          for (std::size_t j = 0; j < d; ++j) gs[r * d + j] += g[rows[r] * d + j];
      }
    });
  }
  return y;
}

// Stacks a [1,d] row n times.
template <class T>
Tensor<T> repeat_rows(const Tensor<T>& row, std::size_t n) {
  detail::require(row.rows() == 1, "repeat_rows: expected a single row, got " +
                                       shape_str(row.shape()));
  const std::size_t d = row.cols();
  Tensor<T> y({n, d});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(row.ptr(), d, y.ptr() + i * d);
  if (auto* tape = detail::tape_for({&row})) {
    y.set_requires_grad();
    tape->record("repeat_rows", [row, y, n, d]() mutable {
      if (!y.has_grad()) return;
      auto g = y.grad();
      auto gr = row.mutable_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) gr[j] += g[i * d + j];
    });
  }
  return y;
}

// Columns [start, start+len) of a matrix.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t len) {
  detail::require_rank2(x, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  detail::require(len >= 1 && start + len <= n,
                  "slice_cols: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                      ") outside " + shape_str(x.shape()));
  Tensor<T> y({m, len});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(x.ptr() + i * n + start, len, y.ptr() + i * len);
  if (auto* tape = detail::tape_for({&x})) {
    y.set_requires_grad();
    tape->record("slice_cols", [x, y, m, n, start, len]() mutable {
      if (!y.has_grad()) return;
      auto g = y.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < len; ++j) gx[i * n + start + j] += g[i * len + j];
    });
  }
  return y;
}

// Concatenation of matrices along axis 0 (rows) or 1 (columns).
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  detail::require(axis < 2, "concat: axis must be 0 or 1");
  for (const auto& p : parts) detail::require_rank2(p, "concat");
  const std::size_t other = 1 - axis;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require(p.dim(other) == parts[0].dim(other),
                    "concat: " + shape_str(p.shape()) + " incompatible with " +
                        shape_str(parts[0].shape()));
    total += p.dim(axis);
  }
  Shape shape = parts[0].shape();
  shape[axis] = total;
  Tensor<T> y(shape);
  const std::size_t n = shape[1];
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t pm = p.dim(0), pn = p.dim(1);
    for (std::size_t i = 0; i < pm; ++i) {
      for (std::size_t j = 0; j < pn; ++j) {
        const std::size_t r = axis == 0 ? off + i : i;
        const std::size_t c = axis == 1 ? off + j : j;
        y[r * n + c] = p[i * pn + j];
      }
    }
    off += p.dim(axis);
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  GradTape<T>* tape = GradTape<T>::active();
  if (tape && any) {
    y.set_requires_grad();
    tape->record("concat", [parts, offsets, y, axis, n]() mutable {
      if (!y.has_grad()) return;
      auto g = y.grad();
      for (std::size_t q = 0; q < parts.size(); ++q) {
        auto& p = parts[q];
        if (!p.requires_grad()) continue;
        auto gp = p.mutable_grad();
        const std::size_t pm = p.dim(0), pn = p.dim(1);
        for (std::size_t i = 0; i < pm; ++i) {
          for (std::size_t j = 0; j < pn; ++j) {
            const std::size_t r = axis == 0 ? offsets[q] + i : i;
            const std::size_t c = axis == 1 ? offsets[q] + j : j;
            gp[i * pn + j] += g[r * n + c];
          }
        }
      }
    });
  }
  return y;
}

// Sum of all elements, shape [1].
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc{0};
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
  Tensor<T> y = Tensor<T>::scalar(acc);
  if (auto* tape = detail::tape_for({&x})) {
    y.set_requires_grad();
    tape->record("sum", [x, y]() mutable {
      if (!y.has_grad()) return;
      const T g = y.grad()[0];
      auto gx = x.mutable_grad();
      for (auto& v : gx) v += g;
    });
  }
  return y;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.size()));
}

// Mean of a matrix over one axis, keeping that axis with extent 1.
template <class T>
Tensor<T> mean_over_axis(const Tensor<T>& x, std::size_t axis) {
  detail::require_rank2(x, "mean_over_axis");
  detail::require(axis < 2, "mean_over_axis: axis must be 0 or 1");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor<T> y(axis == 0 ? Shape{1, n} : Shape{m, 1});
  const T inv = T{1} / static_cast<T>(axis == 0 ? m : n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[axis == 0 ? j : i] += x[i * n + j];
  for (auto& v : y.data()) v *= inv;
  if (auto* tape = detail::tape_for({&x})) {
    y.set_requires_grad();
    tape->record("mean_over_axis", [x, y, m, n, axis, inv]() mutable {
      if (!y.has_grad()) return;
      auto g = y.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[axis == 0 ? j : i] * inv;
    });
  }
  return y;
}

// Exact (erf-based) Gaussian error linear unit.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  if (auto* tape = detail::tape_for({&x})) {
    y.set_requires_grad();
    tape->record("gelu", [x, y]() mutable {
      if (!y.has_grad()) return;
      constexpr T inv_sqrt2 = T(0.70710678118654752440);
      constexpr T inv_sqrt2pi = T(0.39894228040143267794);
      auto g = y.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = x[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return y;
}

// Softmax over the last axis with max subtraction.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t n = x.cols(), r = x.rows();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const T* xr = x.ptr() + i * n;
    T* yr = y.ptr() + i * n;
    T mx = xr[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    T z{0};
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    const T inv = T{1} / z;
    for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
  }
  if (auto* tape = detail::tape_for({&x})) {
    y.set_requires_grad();
    tape->record("softmax_rows", [x, y, r, n]() mutable {
      if (!y.has_grad()) return;
      const T* g = y.grad().data();
      T* gx = x.mutable_grad().data();
      for (std::size_t i = 0; i < r; ++i) {
        const T* yr = y.ptr() + i * n;
        const T* gr = g + i * n;
        T dot{0};
        for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return y;
}

// Normalizes each last-axis row to zero mean and unit variance, then applies
// gamma/beta. Variance is the biased (population) estimate.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-6)) {
  const std::size_t d = x.cols(), r = x.rows();
  detail::require(gamma.size() == d && beta.size() == d,
                  "layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" +
                      shape_str(beta.shape()) + " do not match last axis of " +
                      shape_str(x.shape()));
  Tensor<T> y(x.shape());
  std::vector<T> xhat(x.size());
  std::vector<T> rstd(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* xr = x.ptr() + i * d;
    T mu{0};
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    rstd[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xr[j] - mu) * rstd[i];
      y[i * d + j] = gamma[j] * xhat[i * d + j] + beta[j];
    }
  }
  if (auto* tape = detail::tape_for({&x, &gamma, &beta})) {
    y.set_requires_grad();
    tape->record("layer_norm", [x, gamma, beta, y, xhat = std::move(xhat),
                                rstd = std::move(rstd), r, d]() mutable {
      if (!y.has_grad()) return;
      auto g = y.grad();
      if (gamma.requires_grad()) {
        auto gg = gamma.mutable_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
      }
      if (beta.requires_grad()) {
        auto gb = beta.mutable_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
      }
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        const T inv_d = T{1} / static_cast<T>(d);
        for (std::size_t i = 0; i < r; ++i) {
          T mean_dxh{0}, mean_dxh_xh{0};
          for (std::size_t j = 0; j < d; ++j) {
            const T dxh = g[i * d + j] * gamma[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xhat[i * d + j];
          }
          mean_dxh *= inv_d;
          mean_dxh_xh *= inv_d;
          for (std::size_t j = 0; j < d; ++j) {
            const T dxh = g[i * d + j] * gamma[j];
            gx[i * d + j] += rstd[i] * (dxh - mean_dxh - xhat[i * d + j] * mean_dxh_xh);
          }
        }
      }
    });
  }
  return y;
}

// Mean negative log-likelihood of integer labels under row-wise softmax of
// logits[B, K]; shape [1].
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  detail::require_rank2(logits, "cross_entropy");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  detail::require(labels.size() == b, "cross_entropy: " + std::to_string(labels.size()) +
                                          " labels for " + std::to_string(b) + " rows");
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= k) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(l) + " outside [0," +
                              std::to_string(k) + ")");
    }
  }
  std::vector<T> prob(b * k);
  T total{0};
  for (std::size_t i = 0; i < b; ++i) {
    const T* row = logits.ptr() + i * k;
    T mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T z{0};
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const T log_z = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) prob[i * k + j] = std::exp(row[j] - log_z);
    total += log_z - row[labels[i]];
  }
  Tensor<T> y = Tensor<T>::scalar(total / static_cast<T>(b));
  if (auto* tape = detail::tape_for({&logits})) {
    y.set_requires_grad();
    std::vector<int> lab(labels.begin(), labels.end());
    tape->record("cross_entropy", [logits, y, prob = std::move(prob), lab, b, k]() mutable {
      if (!y.has_grad()) return;
      const T g = y.grad()[0] / static_cast<T>(b);
      auto gl = logits.mutable_grad();
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          const T onehot = static_cast<int>(j) == lab[i] ? T{1} : T{0};
          gl[i * k + j] += g * (prob[i * k + j] - onehot);
        }
      }
    });
  }
  return y;
}

// Runs the tape's adjoints for a scalar loss recorded on the active tape.
template <class T>
void backward(Tensor<T>& loss) {
  GradTape<T>* tape = GradTape<T>::active();
  if (!tape) throw ContractError("backward() called without an active tape");
  tape->backward(loss);
}

}  // namespace stmae
