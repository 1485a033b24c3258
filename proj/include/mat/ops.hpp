#pragma once

// Differentiable tensor ops. Each op computes its forward value eagerly and,
// when a tape is active and some input is tracked, records a backward rule.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mat/blas.hpp"
#include "mat/tensor.hpp"

namespace mat {

/// Sparse vector given as parallel index/weight arrays (hashed text features).
struct SparseVec {
  std::vector<std::uint32_t> index;
  std::vector<double> weight;
};

/// Boolean attention mask; true means the query may attend the key.
struct BoolMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> cells;

  BoolMatrix() = default;
  BoolMatrix(std::size_t r, std::size_t c, bool fill = false)
      : rows(r), cols(c), cells(r * c, fill ? 1 : 0) {}

  bool operator()(std::size_t i, std::size_t j) const { return cells[i * cols + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { cells[i * cols + j] = v ? 1 : 0; }
  bool operator==(const BoolMatrix&) const = default;
};

namespace detail {

template <class T, class F>
Tensor<T> finish(std::string_view kind, const std::vector<Tensor<T>>& inputs, Tensor<T> out,
                 F&& fn) {
  if (auto* tape = active_tape<T>) tape->record(kind, inputs, out, std::forward<F>(fn));
  return out;
}

[[noreturn]] inline void shape_error(std::string_view op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b));
}

inline bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

/// Output shape after removing `axis` (a removed last axis of a rank-1
/// tensor leaves shape [1]).
inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out.push_back(s[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <class T>
void check_broadcast(std::string_view op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape() || b.numel() == 1 || is_suffix(a.shape(), b.shape())) return;
  shape_error(op, a.shape(), b.shape());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic. The right operand may broadcast when its shape is a
// suffix of the left operand's shape, or when it holds a single value.

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_broadcast("add", a, b);
  const std::size_t nb = b.numel();
  Tensor<T> out(a.shape());
  auto o = out.values();
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i % nb];
  return detail::finish<T>("add", {a, b}, out, [nb](std::span<const T> g, GradSink<T>& s) {
    if (s.needs(0)) {
      auto ga = s[0];
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (s.needs(1)) {
      auto gb = s[1];
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_broadcast("sub", a, b);
  const std::size_t nb = b.numel();
  Tensor<T> out(a.shape());
  auto o = out.values();
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] - bv[i % nb];
  return detail::finish<T>("sub", {a, b}, out, [nb](std::span<const T> g, GradSink<T>& s) {
    if (s.needs(0)) {
      auto ga = s[0];
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (s.needs(1)) {
      auto gb = s[1];
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] -= g[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_broadcast("mul_elementwise", a, b);
  const std::size_t nb = b.numel();
  Tensor<T> out(a.shape());
  auto o = out.values();
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i % nb];
  return detail::finish<T>("mul_elementwise", {a, b}, out,
                           [a, b, nb](std::span<const T> g, GradSink<T>& s) {
                             auto av = a.values();
                             auto bv = b.values();
                             if (s.needs(0)) {
                               auto ga = s[0];
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i % nb];
                             }
                             if (s.needs(1)) {
                               auto gb = s[1];
                               for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i] * av[i];
                             }
                           });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  auto o = out.values();
  auto av = a.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * factor;
  return detail::finish<T>("scale", {a}, out, [factor](std::span<const T> g, GradSink<T>& s) {
    auto ga = s[0];
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <class T>
Tensor<T> operator*(const Tensor<T>& a, T factor) {
  return scale(a, factor);
}

/// Copy without a tape node; gradients stop here.
template <class T>
Tensor<T> detach(const Tensor<T>& a) {
  return Tensor<T>(a.shape(), a.vec());
}

// ---------------------------------------------------------------------------
// Products

/// a [..., m, k] x b [k, n] (b shared across the batch) or b [..., k, n] with
/// matching batch dims. With transpose_b, b is stored as [..., n, k].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  if (a.rank() < 2 || b.rank() < 2) detail::shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(-2);
  const std::size_t k = a.dim(-1);
  const std::size_t bk = transpose_b ? b.dim(-1) : b.dim(-2);
  const std::size_t n = transpose_b ? b.dim(-2) : b.dim(-1);
  if (bk != k) detail::shape_error("matmul", a.shape(), b.shape());
  const bool shared = b.rank() == 2;
  std::size_t batch = a.numel() / (m * k);
  if (!shared) {
    if (b.rank() != a.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      detail::shape_error("matmul", a.shape(), b.shape());
    }
  }
  Shape os(a.shape().begin(), a.shape().end() - 1);
  os.push_back(n);
  Tensor<T> out(os);
  const T* ap = a.values().data();
  const T* bp = b.values().data();
  T* op = out.values().data();
  const std::size_t ldb = transpose_b ? k : n;
  if (shared) {
    blas::gemm<T>(false, transpose_b, batch * m, n, k, T{1}, ap, k, bp, ldb, T{0}, op, n);
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      blas::gemm<T>(false, transpose_b, m, n, k, T{1}, ap + i * m * k, k, bp + i * k * n, ldb,
                    T{0}, op + i * m * n, n);
    }
  }
  return detail::finish<T>(
      "matmul", {a, b}, out,
      [a, b, m, n, k, batch, shared, transpose_b, ldb](std::span<const T> g, GradSink<T>& s) {
        const T* ap = a.values().data();
        const T* bp = b.values().data();
        const T* gp = g.data();
        if (s.needs(0)) {
          T* ga = s[0].data();
          // dA = dC * op(B)^T
          if (shared) {
            blas::gemm<T>(false, !transpose_b, batch * m, k, n, T{1}, gp, n, bp, ldb, T{1}, ga, k);
          } else {
            for (std::size_t i = 0; i < batch; ++i) {
              blas::gemm<T>(false, !transpose_b, m, k, n, T{1}, gp + i * m * n, n, bp + i * k * n,
                            ldb, T{1}, ga + i * m * k, k);
            }
          }
        }
        if (s.needs(1)) {
          T* gb = s[1].data();
          // dB = A^T * dC (or its transpose when B is stored transposed)
          if (shared) {
            if (transpose_b) {
              blas::gemm<T>(true, false, n, k, batch * m, T{1}, gp, n, ap, k, T{1}, gb, k);
            } else {
              blas::gemm<T>(true, false, k, n, batch * m, T{1}, ap, k, gp, n, T{1}, gb, n);
            }
          } else {
            for (std::size_t i = 0; i < batch; ++i) {
              if (transpose_b) {
                blas::gemm<T>(true, false, n, k, m, T{1}, gp + i * m * n, n, ap + i * m * k, k,
                              T{1}, gb + i * k * n, k);
              } else {
                blas::gemm<T>(true, false, k, n, m, T{1}, ap + i * m * k, k, gp + i * m * n, n,
                              T{1}, gb + i * k * n, n);
              }
            }
          }
        }
      });
}

/// Affine map over the last axis: x [..., in] * weight[out, in]^T + bias[out].
/// Bias may be an undefined tensor.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2 || x.dim(-1) != weight.dim(1)) {
    detail::shape_error("linear", x.shape(), weight.shape());
  }
  const std::size_t in = weight.dim(1);
  const std::size_t outd = weight.dim(0);
  if (bias.defined() && (bias.numel() != outd)) {
    detail::shape_error("linear", weight.shape(), bias.shape());
  }
  const std::size_t rows = x.numel() / in;
  Shape os(x.shape().begin(), x.shape().end() - 1);
  os.push_back(outd);
  Tensor<T> out(os);
  T* op = out.values().data();
  if (bias.defined()) {
    auto bv = bias.values();
    for (std::size_t r = 0; r < rows; ++r) std::copy(bv.begin(), bv.end(), op + r * outd);
  }
  blas::gemm<T>(false, true, rows, outd, in, T{1}, x.values().data(), in, weight.values().data(),
                in, bias.defined() ? T{1} : T{0}, op, outd);
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return detail::finish<T>(
      "linear", inputs, out,
      [x, weight, rows, in, outd, has_bias](std::span<const T> g, GradSink<T>& s) {
        const T* gp = g.data();
        if (s.needs(0)) {
          blas::gemm<T>(false, false, rows, in, outd, T{1}, gp, outd, weight.values().data(), in,
                        T{1}, s[0].data(), in);
        }
        if (s.needs(1)) {
          blas::gemm<T>(true, false, outd, in, rows, T{1}, gp, outd, x.values().data(), in, T{1},
                        s[1].data(), in);
        }
        if (has_bias && s.needs(2)) {
          auto gb = s[2];
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < outd; ++j) gb[j] += gp[r * outd + j];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Layout

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) detail::shape_error("reshape", a.shape(), shape);
  Tensor<T> out(std::move(shape), a.vec());
  return detail::finish<T>("reshape", {a}, out, [](std::span<const T> g, GradSink<T>& s) {
    auto ga = s[0];
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r) throw DimensionError("permute: permutation rank mismatch");
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw DimensionError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = a.shape()[perm[i]];
  // Source offset for each destination element.
  std::vector<std::size_t> in_stride(r);
  std::size_t acc = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_stride[i] = acc;
    acc *= a.shape()[i];
  }
  std::vector<std::size_t> src(a.numel());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t lin = 0; lin < src.size(); ++lin) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_stride[perm[i]];
    src[lin] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < os[i]) break;
      idx[i] = 0;
    }
  }
  Tensor<T> out(os);
  auto o = out.values();
  auto av = a.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[src[i]];
  return detail::finish<T>("transpose", {a}, out,
                           [src = std::move(src)](std::span<const T> g, GradSink<T>& s) {
                             auto ga = s[0];
                             for (std::size_t i = 0; i < g.size(); ++i) ga[src[i]] += g[i];
                           });
}

/// Swaps two axes (defaults: the last two).
template <class T>
Tensor<T> transpose(const Tensor<T>& a, int axis0 = -2, int axis1 = -1) {
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[a.normalize_axis(axis0)], perm[a.normalize_axis(axis1)]);
  return permute(a, perm);
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const std::size_t ax = parts[0].normalize_axis(axis);
  Shape os = parts[0].shape();
  os[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != os.size()) detail::shape_error("concat", parts[0].shape(), p.shape());
    for (std::size_t i = 0; i < os.size(); ++i) {
      if (i != ax && p.shape()[i] != parts[0].shape()[i]) {
        detail::shape_error("concat", parts[0].shape(), p.shape());
      }
    }
    os[ax] += p.shape()[ax];
  }
  const auto split = detail::split_axis(os, ax);
  Tensor<T> out(os);
  auto o = out.values();
  std::vector<std::size_t> widths;
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[ax] * split.inner;
    auto pv = p.values();
    for (std::size_t r = 0; r < split.outer; ++r) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(r * w), w,
                  o.begin() + static_cast<std::ptrdiff_t>(r * split.extent * split.inner + col));
    }
    widths.push_back(w);
    col += w;
  }
  const std::size_t row = split.extent * split.inner;
  const std::size_t outer = split.outer;
  return detail::finish<T>("concat", parts, out,
                           [widths, row, outer](std::span<const T> g, GradSink<T>& s) {
                             std::size_t c = 0;
                             for (std::size_t p = 0; p < widths.size(); ++p) {
                               if (s.needs(p)) {
                                 auto gp = s[p];
                                 for (std::size_t r = 0; r < outer; ++r) {
                                   for (std::size_t j = 0; j < widths[p]; ++j) {
                                     gp[r * widths[p] + j] += g[r * row + c + j];
                                   }
                                 }
                               }
                               c += widths[p];
                             }
                           });
}

/// Elements [begin, end) along an axis.
template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = a.normalize_axis(axis);
  if (begin >= end || end > a.shape()[ax]) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for shape " + shape_str(a.shape()));
  }
  const auto split = detail::split_axis(a.shape(), ax);
  Shape os = a.shape();
  os[ax] = end - begin;
  Tensor<T> out(os);
  auto o = out.values();
  auto av = a.values();
  const std::size_t w = (end - begin) * split.inner;
  const std::size_t row = split.extent * split.inner;
  const std::size_t off = begin * split.inner;
  for (std::size_t r = 0; r < split.outer; ++r) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(r * row + off), w,
                o.begin() + static_cast<std::ptrdiff_t>(r * w));
  }
  return detail::finish<T>("slice", {a}, out,
                           [w, row, off, outer = split.outer](std::span<const T> g,
                                                              GradSink<T>& s) {
                             auto ga = s[0];
                             for (std::size_t r = 0; r < outer; ++r) {
                               for (std::size_t j = 0; j < w; ++j) ga[r * row + off + j] += g[r * w + j];
                             }
                           });
}

/// Prepends an axis of extent `count` by repetition: [..] -> [count, ..].
template <class T>
Tensor<T> expand(const Tensor<T>& a, std::size_t count) {
  Shape os{count};
  os.insert(os.end(), a.shape().begin(), a.shape().end());
  Tensor<T> out(os);
  auto o = out.values();
  auto av = a.values();
  for (std::size_t c = 0; c < count; ++c) {
    std::copy(av.begin(), av.end(), o.begin() + static_cast<std::ptrdiff_t>(c * av.size()));
  }
  const std::size_t n = a.numel();
  return detail::finish<T>("expand", {a}, out, [n](std::span<const T> g, GradSink<T>& s) {
    auto ga = s[0];
    for (std::size_t i = 0; i < g.size(); ++i) ga[i % n] += g[i];
  });
}

/// Row-wise choice: viewing x as rows of its last axis, row r is kept when
/// keep[r] is set and otherwise replaced by fill row (r mod fill_rows).
template <class T>
Tensor<T> select_rows(const Tensor<T>& x, const Tensor<T>& fill,
                      const std::vector<std::uint8_t>& keep) {
  const std::size_t d = x.dim(-1);
  if (fill.rank() != 2 || fill.dim(1) != d) detail::shape_error("select_rows", x.shape(), fill.shape());
  const std::size_t rows = x.numel() / d;
  if (keep.size() != rows) throw DimensionError("select_rows: keep mask length mismatch");
  const std::size_t nf = fill.dim(0);
  Tensor<T> out(x.shape());
  auto o = out.values();
  auto xv = x.values();
  auto fv = fill.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = keep[r] ? xv.data() + r * d : fv.data() + (r % nf) * d;
    std::copy_n(src, d, o.data() + r * d);
  }
  return detail::finish<T>("select_rows", {x, fill}, out,
                           [keep, d, nf](std::span<const T> g, GradSink<T>& s) {
                             for (std::size_t r = 0; r < keep.size(); ++r) {
                               if (keep[r]) {
                                 if (!s.needs(0)) continue;
                                 auto gx = s[0];
                                 for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j];
                               } else {
                                 if (!s.needs(1)) continue;
                                 auto gf = s[1];
                                 for (std::size_t j = 0; j < d; ++j) gf[(r % nf) * d + j] += g[r * d + j];
                               }
                             }
                           });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a, int axis) {
  const std::size_t ax = a.normalize_axis(axis);
  const auto sp = detail::split_axis(a.shape(), ax);
  Tensor<T> out(detail::drop_axis(a.shape(), ax));
  auto o = out.values();
  auto av = a.values();
  for (std::size_t r = 0; r < sp.outer; ++r) {
    for (std::size_t e = 0; e < sp.extent; ++e) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        o[r * sp.inner + i] += av[(r * sp.extent + e) * sp.inner + i];
      }
    }
  }
  return detail::finish<T>("sum", {a}, out, [sp](std::span<const T> g, GradSink<T>& s) {
    auto ga = s[0];
    for (std::size_t r = 0; r < sp.outer; ++r) {
      for (std::size_t e = 0; e < sp.extent; ++e) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          ga[(r * sp.extent + e) * sp.inner + i] += g[r * sp.inner + i];
        }
      }
    }
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a, int axis) {
  const auto n = a.dim(axis);
  return scale(sum(a, axis), T{1} / static_cast<T>(n));
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  return sum(reshape(a, Shape{a.numel()}), 0);
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scale(sum_all(a), T{1} / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// Nonlinearities

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  auto o = out.values();
  auto av = a.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::exp(av[i]);
  return detail::finish<T>("exp", {a}, out, [out](std::span<const T> g, GradSink<T>& s) {
    auto ga = s[0];
    auto ov = out.values();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ov[i];
  });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  auto o = out.values();
  auto av = a.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    if (!(av[i] >= T{0})) throw DomainError("log: negative or NaN input");
    o[i] = std::log(av[i]);
  }
  return detail::finish<T>("log", {a}, out, [a](std::span<const T> g, GradSink<T>& s) {
    auto ga = s[0];
    auto av = a.values();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / av[i];
  });
}

/// GELU, tanh approximation (GPT-2 form).
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = static_cast<T>(0.044715);
  Tensor<T> out(a.shape());
  auto o = out.values();
  auto av = a.values();
  auto th = std::make_shared<std::vector<T>>(o.size());
  for (std::size_t i = 0; i < o.size(); ++i) {
    const T x = av[i];
    const T u = c * (x + k * x * x * x);
    // tanh(u) = 1 - 2 / (exp(2u) + 1); cheaper than std::tanh and exact at the limits.
    const T t = T{1} - T{2} / (std::exp(T{2} * u) + T{1});
    (*th)[i] = t;
    o[i] = T{0.5} * x * (T{1} + t);
  }
  return detail::finish<T>("gelu", {a}, out, [a, th](std::span<const T> g, GradSink<T>& s) {
    auto ga = s[0];
    auto av = a.values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T x = av[i];
      const T t = (*th)[i];
      const T dinner = c * (T{1} + T{3} * k * x * x);
      ga[i] += g[i] * (T{0.5} * (T{1} + t) + T{0.5} * x * (T{1} - t * t) * dinner);
    }
  });
}

namespace detail {
template <class T>
void softmax_backward(std::span<const T> y, std::span<const T> g, std::span<T> gx,
                      const AxisSplit& sp) {
  for (std::size_t r = 0; r < sp.outer; ++r) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      T dot{0};
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const std::size_t at = (r * sp.extent + e) * sp.inner + i;
        dot += g[at] * y[at];
      }
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const std::size_t at = (r * sp.extent + e) * sp.inner + i;
        gx[at] += y[at] * (g[at] - dot);
      }
    }
  }
}
}  // namespace detail

template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  const std::size_t ax = a.normalize_axis(axis);
  const auto sp = detail::split_axis(a.shape(), ax);
  if (sp.extent == 0) throw DomainError("softmax: empty axis");
  Tensor<T> out(a.shape());
  auto o = out.values();
  auto av = a.values();
  for (std::size_t r = 0; r < sp.outer; ++r) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < sp.extent; ++e) {
        mx = std::max(mx, av[(r * sp.extent + e) * sp.inner + i]);
      }
      T total{0};
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const std::size_t at = (r * sp.extent + e) * sp.inner + i;
        o[at] = std::exp(av[at] - mx);
        total += o[at];
      }
      for (std::size_t e = 0; e < sp.extent; ++e) o[(r * sp.extent + e) * sp.inner + i] /= total;
    }
  }
  return detail::finish<T>("softmax", {a}, out, [out, sp](std::span<const T> g, GradSink<T>& s) {
    detail::softmax_backward<T>(out.values(), g, s[0], sp);
  });
}

/// Softmax over the last axis restricted to keys allowed by `mask`
/// ([rows, cols] matching the last two axes, shared across leading axes).
/// Masked entries get weight exactly 0. A row with no allowed key is a
/// contract violation unless `zero_fill_empty` is set, in which case the row
/// is all zeros.
template <class T>
Tensor<T> masked_softmax(const Tensor<T>& a, const BoolMatrix& mask, bool zero_fill_empty = false) {
  if (a.rank() < 2 || a.dim(-2) != mask.rows || a.dim(-1) != mask.cols) {
    throw DimensionError("masked_softmax: mask " + std::to_string(mask.rows) + "x" +
                         std::to_string(mask.cols) + " does not match scores " +
                         shape_str(a.shape()));
  }
  const std::size_t cols = mask.cols;
  const std::size_t rows_total = a.numel() / cols;
  Tensor<T> out(a.shape());
  auto o = out.values();
  auto av = a.values();
  for (std::size_t r = 0; r < rows_total; ++r) {
    const std::size_t q = r % mask.rows;
    const T* x = av.data() + r * cols;
    T* y = o.data() + r * cols;
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < cols; ++j) {
      if (mask(q, j)) {
        mx = std::max(mx, x[j]);
        any = true;
      }
    }
    if (!any) {
      if (!zero_fill_empty) throw ContractError("masked_softmax: query row has no allowed key");
      continue;
    }
    T total{0};
    for (std::size_t j = 0; j < cols; ++j) {
      if (mask(q, j)) {
        y[j] = std::exp(x[j] - mx);
        total += y[j];
      }
    }
    for (std::size_t j = 0; j < cols; ++j) y[j] /= total;
  }
  return detail::finish<T>("masked_softmax", {a}, out,
                           [out, cols, rows_total](std::span<const T> g, GradSink<T>& s) {
                             detail::softmax_backward<T>(out.values(), g, s[0],
                                                         detail::AxisSplit{rows_total, cols, 1});
                           });
}

/// Scaled dot-product attention over already-projected q [G, Sq, d] and
/// k, v [G, Sk, d], split into `heads` contiguous channel groups. Equivalent
/// to splitting heads, masked_softmax(q k^T / sqrt(d/heads)) v and merging,
/// as one op so no per-head copies are made.
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    const BoolMatrix& mask, bool zero_fill_empty = false) {
  if (q.rank() != 3 || k.rank() != 3 || v.shape() != k.shape() || q.dim(0) != k.dim(0) ||
      q.dim(2) != k.dim(2)) {
    detail::shape_error("attention", q.shape(), k.shape());
  }
  const std::size_t groups = q.dim(0);
  const std::size_t sq = q.dim(1);
  const std::size_t sk = k.dim(1);
  const std::size_t d = q.dim(2);
  if (heads == 0 || d % heads != 0) throw ConfigError("attention: dim not divisible by heads");
  if (mask.rows != sq || mask.cols != sk) {
    throw DimensionError("attention: mask " + std::to_string(mask.rows) + "x" +
                         std::to_string(mask.cols) + " does not match " + std::to_string(sq) +
                         "x" + std::to_string(sk));
  }
  const std::size_t dh = d / heads;
  const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  // weights[((g * heads + h) * sq + i) * sk + j]
  auto weights = std::make_shared<std::vector<T>>(groups * heads * sq * sk, T{0});
  Tensor<T> out(q.shape());
  auto qv = q.values();
  auto kv = k.values();
  auto vv = v.values();
  auto o = out.values();
  std::vector<T> row(sk);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < sq; ++i) {
        const T* qi = qv.data() + (g * sq + i) * d + h * dh;
        T* w = weights->data() + ((g * heads + h) * sq + i) * sk;
        T mx = -std::numeric_limits<T>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < sk; ++j) {
          if (!mask(i, j)) continue;
          const T* kj = kv.data() + (g * sk + j) * d + h * dh;
          T acc{0};
          for (std::size_t p = 0; p < dh; ++p) acc += qi[p] * kj[p];
          row[j] = acc * sc;
          mx = std::max(mx, row[j]);
          any = true;
        }
        if (!any) {
          if (!zero_fill_empty) throw ContractError("attention: query row has no allowed key");
          continue;
        }
        T total{0};
        for (std::size_t j = 0; j < sk; ++j) {
          if (!mask(i, j)) continue;
          w[j] = std::exp(row[j] - mx);
          total += w[j];
        }
        T* oi = o.data() + (g * sq + i) * d + h * dh;
        for (std::size_t j = 0; j < sk; ++j) {
          if (!mask(i, j)) continue;
          w[j] /= total;
          const T* vj = vv.data() + (g * sk + j) * d + h * dh;
          for (std::size_t p = 0; p < dh; ++p) oi[p] += w[j] * vj[p];
        }
      }
    }
  }
  return detail::finish<T>(
      "attention", {q, k, v}, out,
      [q, k, v, weights, groups, heads, sq, sk, d, dh, sc](std::span<const T> g, GradSink<T>& s) {
        auto qv = q.values();
        auto kv = k.values();
        auto vv = v.values();
        const bool need_q = s.needs(0);
        const bool need_k = s.needs(1);
        const bool need_v = s.needs(2);
        std::span<T> gq = need_q ? s[0] : std::span<T>{};
        std::span<T> gk = need_k ? s[1] : std::span<T>{};
        std::span<T> gv = need_v ? s[2] : std::span<T>{};
        std::vector<T> gw(sk);
        for (std::size_t b = 0; b < groups; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < sq; ++i) {
              const T* w = weights->data() + ((b * heads + h) * sq + i) * sk;
              const T* go = g.data() + (b * sq + i) * d + h * dh;
              T dot{0};
              for (std::size_t j = 0; j < sk; ++j) {
                const T* vj = vv.data() + (b * sk + j) * d + h * dh;
                T acc{0};
                for (std::size_t p = 0; p < dh; ++p) acc += go[p] * vj[p];
                gw[j] = acc;
                dot += acc * w[j];
                if (need_v && w[j] != T{0}) {
                  T* gvj = gv.data() + (b * sk + j) * d + h * dh;
                  for (std::size_t p = 0; p < dh; ++p) gvj[p] += w[j] * go[p];
                }
              }
              const T* qi = qv.data() + (b * sq + i) * d + h * dh;
              for (std::size_t j = 0; j < sk; ++j) {
                if (w[j] == T{0}) continue;
                const T gs = w[j] * (gw[j] - dot) * sc;
                const T* kj = kv.data() + (b * sk + j) * d + h * dh;
                if (need_q) {
                  T* gqi = gq.data() + (b * sq + i) * d + h * dh;
                  for (std::size_t p = 0; p < dh; ++p) gqi[p] += gs * kj[p];
                }
                if (need_k) {
                  T* gkj = gk.data() + (b * sk + j) * d + h * dh;
                  for (std::size_t p = 0; p < dh; ++p) gkj[p] += gs * qi[p];
                }
              }
            }
          }
        }
      });
}

/// Normalizes over the last axis; gamma/beta (shape [D]) are optional.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t d = x.dim(-1);
  if ((gamma.defined() && gamma.numel() != d) || (beta.defined() && beta.numel() != d)) {
    detail::shape_error("layer_norm", x.shape(), gamma.defined() ? gamma.shape() : beta.shape());
  }
  const std::size_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  auto xv = x.values();
  auto o = out.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    T mu{0};
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mu) * rstd[r];
      xhat[r * d + j] = h;
      T y = h;
      if (gamma.defined()) y *= gamma.values()[j];
      if (beta.defined()) y += beta.values()[j];
      o[r * d + j] = y;
    }
  }
  std::vector<Tensor<T>> inputs{x};
  if (gamma.defined()) inputs.push_back(gamma);
  if (beta.defined()) inputs.push_back(beta);
  const bool has_gamma = gamma.defined();
  const bool has_beta = beta.defined();
  return detail::finish<T>(
      "layer_norm", inputs, out,
      [gamma, xhat = std::move(xhat), rstd = std::move(rstd), d, rows, has_gamma, has_beta](
          std::span<const T> g, GradSink<T>& s) {
        const std::size_t gi = 1;
        const std::size_t bi = has_gamma ? 2 : 1;
        if (has_gamma && s.needs(gi)) {
          auto gg = s[gi];
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
        }
        if (has_beta && s.needs(bi)) {
          auto gb = s[bi];
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
        if (s.needs(0)) {
          auto gx = s[0];
          std::vector<T> dh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            T sum_dh{0};
            T sum_dh_h{0};
            for (std::size_t j = 0; j < d; ++j) {
              dh[j] = g[r * d + j] * (has_gamma ? gamma.values()[j] : T{1});
              sum_dh += dh[j];
              sum_dh_h += dh[j] * xhat[r * d + j];
            }
            const T inv_d = T{1} / static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              gx[r * d + j] +=
                  rstd[r] * (dh[j] - inv_d * sum_dh - xhat[r * d + j] * inv_d * sum_dh_h);
            }
          }
        }
      });
}

/// x / sqrt(sum(x^2) + eps) along an axis.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& a, int axis = -1, T eps = T(1e-12)) {
  const std::size_t ax = a.normalize_axis(axis);
  const auto sp = detail::split_axis(a.shape(), ax);
  Tensor<T> out(a.shape());
  std::vector<T> inv_norm(sp.outer * sp.inner);
  auto av = a.values();
  auto o = out.values();
  for (std::size_t r = 0; r < sp.outer; ++r) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      T ss{0};
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const T v = av[(r * sp.extent + e) * sp.inner + i];
        ss += v * v;
      }
      const T inv = T{1} / std::sqrt(ss + eps);
      inv_norm[r * sp.inner + i] = inv;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const std::size_t at = (r * sp.extent + e) * sp.inner + i;
        o[at] = av[at] * inv;
      }
    }
  }
  return detail::finish<T>(
      "l2_normalize", {a}, out,
      [out, sp, inv_norm = std::move(inv_norm)](std::span<const T> g, GradSink<T>& s) {
        auto ga = s[0];
        auto y = out.values();
        for (std::size_t r = 0; r < sp.outer; ++r) {
          for (std::size_t i = 0; i < sp.inner; ++i) {
            T dot{0};
            for (std::size_t e = 0; e < sp.extent; ++e) {
              const std::size_t at = (r * sp.extent + e) * sp.inner + i;
              dot += g[at] * y[at];
            }
            const T inv = inv_norm[r * sp.inner + i];
            for (std::size_t e = 0; e < sp.extent; ++e) {
              const std::size_t at = (r * sp.extent + e) * sp.inner + i;
              ga[at] += inv * (g[at] - y[at] * dot);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Lookups

/// Rows of `table` [V, d] selected by ids -> [n, d].
template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<std::size_t>& ids) {
  if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be rank 2");
  if (ids.empty()) throw DimensionError("embedding_lookup: no ids");
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  Tensor<T> out(Shape{ids.size(), d});
  auto o = out.values();
  auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw DataError("embedding_lookup: id " + std::to_string(ids[i]) + " outside table of " +
                      std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.data() + ids[i] * d, d, o.data() + i * d);
  }
  return detail::finish<T>("embedding_lookup", {table}, out,
                           [ids, d](std::span<const T> g, GradSink<T>& s) {
                             auto gt = s[0];
                             for (std::size_t i = 0; i < ids.size(); ++i)
                               for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += g[i * d + j];
                           });
}

/// Weighted sum of table rows per bag: out[b] = sum_i w_i * table[idx_i].
/// Equivalent to multiplying sparse row vectors by `table`.
template <class T>
Tensor<T> embedding_bag(const Tensor<T>& table, const std::vector<const SparseVec*>& bags) {
  if (table.rank() != 2) throw DimensionError("embedding_bag: table must be rank 2");
  if (bags.empty()) throw DimensionError("embedding_bag: no bags");
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  Tensor<T> out(Shape{bags.size(), d});
  auto o = out.values();
  auto tv = table.values();
  for (std::size_t b = 0; b < bags.size(); ++b) {
    const auto& bag = *bags[b];
    for (std::size_t i = 0; i < bag.index.size(); ++i) {
      if (bag.index[i] >= vocab) throw DataError("embedding_bag: index outside table");
      const T w = static_cast<T>(bag.weight[i]);
      const T* row = tv.data() + bag.index[i] * d;
      for (std::size_t j = 0; j < d; ++j) o[b * d + j] += w * row[j];
    }
  }
  return detail::finish<T>("embedding_bag", {table}, out,
                           [bags, d](std::span<const T> g, GradSink<T>& s) {
                             auto gt = s[0];
                             for (std::size_t b = 0; b < bags.size(); ++b) {
                               const auto& bag = *bags[b];
                               for (std::size_t i = 0; i < bag.index.size(); ++i) {
                                 const T w = static_cast<T>(bag.weight[i]);
                                 T* row = gt.data() + bag.index[i] * d;
                                 for (std::size_t j = 0; j < d; ++j) row[j] += w * g[b * d + j];
                               }
                             }
                           });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean squared error over all elements -> shape [1].
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) detail::shape_error("mse", a.shape(), b.shape());
  auto av = a.values();
  auto bv = b.values();
  T acc{0};
  for (std::size_t i = 0; i < av.size(); ++i) acc += (av[i] - bv[i]) * (av[i] - bv[i]);
  const T n = static_cast<T>(av.size());
  Tensor<T> out = Tensor<T>::scalar(acc / n);
  return detail::finish<T>("mse", {a, b}, out, [a, b, n](std::span<const T> g, GradSink<T>& s) {
    auto av = a.values();
    auto bv = b.values();
    const T c = T{2} * g[0] / n;
    if (s.needs(0)) {
      auto ga = s[0];
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += c * (av[i] - bv[i]);
    }
    if (s.needs(1)) {
      auto gb = s[1];
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= c * (av[i] - bv[i]);
    }
  });
}

/// Softmax cross-entropy of logits [N, C] against class ids, averaged over
/// rows -> shape [1]. Uses max-subtraction for stability.
template <class T>
Tensor<T> cross_entropy_with_logits(const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy_with_logits: logits " + shape_str(logits.shape()) +
                         " vs " + std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = logits.dim(0);
  const std::size_t c = logits.dim(1);
  std::vector<T> probs(n * c);
  auto lv = logits.values();
  T total{0};
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] >= c) {
      throw DataError("cross_entropy_with_logits: target " + std::to_string(targets[r]) +
                      " outside [0," + std::to_string(c) + ")");
    }
    const T* x = lv.data() + r * c;
    const T mx = *std::max_element(x, x + c);
    T z{0};
    for (std::size_t j = 0; j < c; ++j) {
      probs[r * c + j] = std::exp(x[j] - mx);
      z += probs[r * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    total += -(x[targets[r]] - mx - std::log(z));
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(n));
  return detail::finish<T>("cross_entropy_with_logits", {logits}, out,
                           [probs = std::move(probs), targets, n, c](std::span<const T> g,
                                                                     GradSink<T>& s) {
                             auto gl = s[0];
                             const T k = g[0] / static_cast<T>(n);
                             for (std::size_t r = 0; r < n; ++r) {
                               for (std::size_t j = 0; j < c; ++j) {
                                 const T y = j == targets[r] ? T{1} : T{0};
                                 gl[r * c + j] += k * (probs[r * c + j] - y);
                               }
                             }
                           });
}

}  // namespace mat
