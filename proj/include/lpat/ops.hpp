#pragma once

// Differentiable primitives. Every function validates shapes, computes the
// forward value eagerly and registers a backward closure that captures the
// activations it needs.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lpat/error.hpp"
#include "lpat/tensor.hpp"

namespace lpat {

/// Score value standing in for minus infinity.
template <typename T>
constexpr T masked_score() {
  return std::numeric_limits<T>::lowest();
}

template <typename T>
constexpr bool is_masked_score(T v) {
  return v == std::numeric_limits<T>::lowest() || v == -std::numeric_limits<T>::infinity();
}

namespace detail {

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(s));
  }
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) + " differ");
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  Array<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor<T>::record("add", std::move(out), {a, b}, [](const std::vector<T>& g, detail::GradSinks<T>& s) {
    for (auto* sink : s) {
      if (!sink) continue;
      for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Array<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return Tensor<T>::record("scale", std::move(out), {a}, [factor](const std::vector<T>& g, detail::GradSinks<T>& s) {
    for (std::size_t i = 0; i < g.size(); ++i) (*s[0])[i] += g[i] * factor;
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Array<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > T{0} ? a.data()[i] : T{0};
  return Tensor<T>::record("relu", std::move(out), {a}, [a](const std::vector<T>& g, detail::GradSinks<T>& s) {
    auto x = a.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > T{0}) (*s[0])[i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  Array<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
  auto y = out.data;
  return Tensor<T>::record("exp", std::move(out), {a}, [y = std::move(y)](const std::vector<T>& g, detail::GradSinks<T>& s) {
    for (std::size_t i = 0; i < g.size(); ++i) (*s[0])[i] += g[i] * y[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total{0};
  for (T v : a.data()) total += v;
  return Tensor<T>::record("sum", Array<T>::scalar(total), {a}, [](const std::vector<T>& g, detail::GradSinks<T>& s) {
    for (auto& v : *s[0]) v += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.size()));
}

/// Sum of a ⊙ w for a constant weight array w.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& a, const Array<T>& w) {
  detail::require_same(a.shape(), w.shape, "weighted_sum");
  T total{0};
  for (std::size_t i = 0; i < a.size(); ++i) total += a.data()[i] * w[i];
  return Tensor<T>::record("weighted_sum", Array<T>::scalar(total), {a},
                           [w = w.data](const std::vector<T>& g, detail::GradSinks<T>& s) {
                             for (std::size_t i = 0; i < w.size(); ++i) (*s[0])[i] += g[0] * w[i];
                           });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), p = a.dim(1), q = b.dim(1);
  Array<T> out(Shape{m, q});
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = &out.data[i * q];
    for (std::size_t l = 0; l < p; ++l) {
      const T av = A[i * p + l];
      const T* brow = &B[l * q];
      for (std::size_t j = 0; j < q; ++j) row[j] += av * brow[j];
    }
  }
  return Tensor<T>::record("matmul", std::move(out), {a, b}, [a, b, m, p, q](const std::vector<T>& g, detail::GradSinks<T>& s) {
    auto A = a.data();
    auto B = b.data();
    if (s[0]) {
      auto& ga = *s[0];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < p; ++l) {
          T acc{0};
          for (std::size_t j = 0; j < q; ++j) acc += g[i * q + j] * B[l * q + j];
          ga[i * p + l] += acc;
        }
    }
    if (s[1]) {
      auto& gb = *s[1];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < p; ++l) {
          const T av = A[i * p + l];
          for (std::size_t j = 0; j < q; ++j) gb[l * q + j] += av * g[i * q + j];
        }
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a.shape(), 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Array<T> out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = a.data()[i * c + j];
  return Tensor<T>::record("transpose", std::move(out), {a}, [r, c](const std::vector<T>& g, detail::GradSinks<T>& s) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*s[0])[i * c + j] += g[j * r + i];
  });
}

/// X[n×c] + b[c] broadcast over rows.
template <typename T>
Tensor<T> add_row_bias(const Tensor<T>& x, const Tensor<T>& b) {
  detail::require_rank(x.shape(), 2, "add_row_bias");
  if (b.size() != x.dim(1)) {
    throw DimensionError("add_row_bias: bias " + shape_str(b.shape()) + " does not fit " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1);
  Array<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] = x.data()[i * c + j] + b.data()[j];
  return Tensor<T>::record("add_row_bias", std::move(out), {x, b}, [n, c](const std::vector<T>& g, detail::GradSinks<T>& s) {
    if (s[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*s[0])[i] += g[i];
    if (s[1])
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) (*s[1])[j] += g[i * c + j];
  });
}

/// x[C×H×W] + b[C] broadcast over the spatial grid.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  detail::require_rank(x.shape(), 3, "add_channel_bias");
  if (b.size() != x.dim(0)) {
    throw DimensionError("add_channel_bias: bias " + shape_str(b.shape()) + " does not fit " + shape_str(x.shape()));
  }
  const std::size_t channels = x.dim(0), plane = x.dim(1) * x.dim(2);
  Array<T> out(x.shape());
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) out.data[c * plane + i] = x.data()[c * plane + i] + b.data()[c];
  return Tensor<T>::record("add_channel_bias", std::move(out), {x, b},
                           [channels, plane](const std::vector<T>& g, detail::GradSinks<T>& s) {
                             if (s[0])
                               for (std::size_t i = 0; i < g.size(); ++i) (*s[0])[i] += g[i];
                             if (s[1])
                               for (std::size_t c = 0; c < channels; ++c)
                                 for (std::size_t i = 0; i < plane; ++i) (*s[1])[c] += g[c * plane + i];
                           });
}

/// Output extent of a strided, padded convolution along one axis; throws
/// ConfigError when the window does not tile the padded input exactly.
inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ConfigError("conv2d: stride must be >= 1");
  const std::size_t padded = in + 2 * pad;
  if (kernel > padded) {
    throw ConfigError("conv2d: kernel " + std::to_string(kernel) + " exceeds padded extent " + std::to_string(padded));
  }
  if ((padded - kernel) % stride != 0) {
    throw ConfigError("conv2d: extent " + std::to_string(in) + " with kernel " + std::to_string(kernel) +
                      ", stride " + std::to_string(stride) + ", pad " + std::to_string(pad) +
                      " does not give an exact output size");
  }
  return (padded - kernel) / stride + 1;
}

/// Cross-correlation of input[C_in×H×W] with kernel[C_out×C_in×kh×kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, std::size_t pad) {
  detail::require_rank(input.shape(), 3, "conv2d input");
  detail::require_rank(kernel.shape(), 4, "conv2d kernel");
  if (kernel.dim(1) != input.dim(0)) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " does not accept input " +
                         shape_str(input.shape()));
  }
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  const std::size_t oh = conv_output_extent(h, kh, stride, pad);
  const std::size_t ow = conv_output_extent(w, kw, stride, pad);

  // Visits every (output, input, kernel) triple that lands inside the image.
  auto visit = [=](auto&& fn) {
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t i = 0; i < kh; ++i)
          for (std::size_t j = 0; j < kw; ++j) {
            const std::size_t widx = ((o * cin + c) * kh + i) * kw + j;
            for (std::size_t y = 0; y < oh; ++y) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + i) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t x = 0; x < ow; ++x) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * stride + j) - static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                fn((o * oh + y) * ow + x, (c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix), widx);
              }
            }
          }
  };

  Array<T> out(Shape{cout, oh, ow});
  auto in = input.data();
  auto ker = kernel.data();
  visit([&](std::size_t oi, std::size_t ii, std::size_t wi) { out.data[oi] += ker[wi] * in[ii]; });
  return Tensor<T>::record("conv2d", std::move(out), {input, kernel},
                           [input, kernel, visit](const std::vector<T>& g, detail::GradSinks<T>& s) {
                             auto in = input.data();
                             auto ker = kernel.data();
                             auto* gi = s[0];
                             auto* gk = s[1];
                             visit([&](std::size_t oi, std::size_t ii, std::size_t wi) {
                               if (gi) (*gi)[ii] += g[oi] * ker[wi];
                               if (gk) (*gk)[wi] += g[oi] * in[ii];
                             });
                           });
}

/// Per-channel valid cross-correlation of a template map over a search map.
template <typename T>
Tensor<T> depthwise_xcorr(const Tensor<T>& templ, const Tensor<T>& search) {
  detail::require_rank(templ.shape(), 3, "dwc template");
  detail::require_rank(search.shape(), 3, "dwc search");
  if (templ.dim(0) != search.dim(0)) {
    throw DimensionError("dwc: channel counts differ, " + shape_str(templ.shape()) + " vs " + shape_str(search.shape()));
  }
  if (templ.dim(1) > search.dim(1) || templ.dim(2) > search.dim(2)) {
    throw ContractError("dwc: template " + shape_str(templ.shape()) + " larger than search " + shape_str(search.shape()));
  }
  const std::size_t channels = templ.dim(0), hz = templ.dim(1), wz = templ.dim(2);
  const std::size_t hx = search.dim(1), wx = search.dim(2);
  const std::size_t oh = hx - hz + 1, ow = wx - wz + 1;

  auto visit = [=](auto&& fn) {
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t u = 0; u < oh; ++u)
        for (std::size_t v = 0; v < ow; ++v)
          for (std::size_t i = 0; i < hz; ++i)
            for (std::size_t j = 0; j < wz; ++j)
              fn((c * oh + u) * ow + v, (c * hz + i) * wz + j, (c * hx + u + i) * wx + v + j);
  };

  Array<T> out(Shape{channels, oh, ow});
  auto z = templ.data();
  auto x = search.data();
  visit([&](std::size_t oi, std::size_t zi, std::size_t xi) { out.data[oi] += z[zi] * x[xi]; });
  return Tensor<T>::record("dwc", std::move(out), {templ, search},
                           [templ, search, visit](const std::vector<T>& g, detail::GradSinks<T>& s) {
                             auto z = templ.data();
                             auto x = search.data();
                             visit([&](std::size_t oi, std::size_t zi, std::size_t xi) {
                               if (s[0]) (*s[0])[zi] += g[oi] * x[xi];
                               if (s[1]) (*s[1])[xi] += g[oi] * z[zi];
                             });
                           });
}

/// C×H×W feature map → (H·W)×C token sequence, row-major over the grid.
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& grid) {
  detail::require_rank(grid.shape(), 3, "to_tokens");
  const std::size_t c = grid.dim(0), n = grid.dim(1) * grid.dim(2);
  Array<T> out(Shape{n, c});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < n; ++i) out.data[i * c + ch] = grid.data()[ch * n + i];
  return Tensor<T>::record("to_tokens", std::move(out), {grid}, [c, n](const std::vector<T>& g, detail::GradSinks<T>& s) {
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < n; ++i) (*s[0])[ch * n + i] += g[i * c + ch];
  });
}

/// (H·W)×C token sequence → C×H×W feature map.
template <typename T>
Tensor<T> to_grid(const Tensor<T>& tokens, std::size_t height, std::size_t width) {
  detail::require_rank(tokens.shape(), 2, "to_grid");
  if (tokens.dim(0) != height * width) {
    throw ContractError("to_grid: " + std::to_string(tokens.dim(0)) + " tokens do not fill a " +
                        std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  const std::size_t c = tokens.dim(1), n = tokens.dim(0);
  Array<T> out(Shape{c, height, width});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < n; ++i) out.data[ch * n + i] = tokens.data()[i * c + ch];
  return Tensor<T>::record("to_grid", std::move(out), {tokens}, [c, n](const std::vector<T>& g, detail::GradSinks<T>& s) {
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < n; ++i) (*s[0])[i * c + ch] += g[ch * n + i];
  });
}

/// Concatenation along one axis; all other extents must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = first;
    if (a.size() != b.size()) throw DimensionError("concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    a[axis] = b[axis] = 0;
    if (a != b) throw DimensionError("concat: shapes " + shape_str(p.shape()) + " and " + shape_str(first) + " differ off-axis");
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_stride = out_shape[axis] * inner;

  Array<T> out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.data.begin() + static_cast<std::ptrdiff_t>(o * out_stride + offset));
    offset += chunk;
  }
  std::vector<std::size_t> chunks;
  for (const auto& p : parts) chunks.push_back(p.dim(axis) * inner);
  return Tensor<T>::record("concat", std::move(out), parts,
                           [outer, out_stride, offsets, chunks](const std::vector<T>& g, detail::GradSinks<T>& s) {
                             for (std::size_t k = 0; k < s.size(); ++k) {
                               if (!s[k]) continue;
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t i = 0; i < chunks[k]; ++i)
                                   (*s[k])[o * chunks[k] + i] += g[o * out_stride + offsets[k] + i];
                             }
                           });
}

/// Half-open range [begin, end) along one axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.rank() || begin >= end || end > a.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " invalid for " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t in_stride = a.dim(axis) * inner, chunk = (end - begin) * inner, start = begin * inner;
  Array<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(o * in_stride + start), chunk,
                out.data.begin() + static_cast<std::ptrdiff_t>(o * chunk));
  return Tensor<T>::record("slice", std::move(out), {a},
                           [outer, in_stride, chunk, start](const std::vector<T>& g, detail::GradSinks<T>& s) {
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t i = 0; i < chunk; ++i) (*s[0])[o * in_stride + start + i] += g[o * chunk + i];
                           });
}

/// Selected rows of a 2-D tensor, in the given order.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::vector<std::size_t> rows) {
  detail::require_rank(a.shape(), 2, "gather_rows");
  if (rows.empty()) throw ContractError("gather_rows: empty selection");
  const std::size_t c = a.dim(1);
  Array<T> out(Shape{rows.size(), c});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= a.dim(0)) throw DimensionError("gather_rows: row " + std::to_string(rows[r]) + " out of range");
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * c), c,
                out.data.begin() + static_cast<std::ptrdiff_t>(r * c));
  }
  return Tensor<T>::record("gather_rows", std::move(out), {a},
                           [rows = std::move(rows), c](const std::vector<T>& g, detail::GradSinks<T>& s) {
                             for (std::size_t r = 0; r < rows.size(); ++r)
                               for (std::size_t j = 0; j < c; ++j) (*s[0])[rows[r] * c + j] += g[r * c + j];
                           });
}

/// Replaces entries whose keep flag is zero by the masked score sentinel.
template <typename T>
Tensor<T> mask_fill(const Tensor<T>& a, std::vector<std::uint8_t> keep) {
  if (keep.size() != a.size()) throw DimensionError("mask_fill: mask length does not match " + shape_str(a.shape()));
  Array<T> out(a.value());
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (!keep[i]) out.data[i] = masked_score<T>();
  return Tensor<T>::record("mask_fill", std::move(out), {a},
                           [keep = std::move(keep)](const std::vector<T>& g, detail::GradSinks<T>& s) {
                             for (std::size_t i = 0; i < g.size(); ++i)
                               if (keep[i]) (*s[0])[i] += g[i];
                           });
}

/// Row-wise softmax with max subtraction. Masked-score entries come out as
/// exact zeros.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 2, "softmax_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Array<T> out(x.shape());
  auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = &in[r * cols];
    T* dst = &out.data[r * cols];
    T peak = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (!is_masked_score(row[c])) peak = std::max(peak, row[c]);
    if (peak == -std::numeric_limits<T>::infinity()) throw DegenerateRowError(r);
    T total{0};
    for (std::size_t c = 0; c < cols; ++c) {
      dst[c] = is_masked_score(row[c]) ? T{0} : std::exp(row[c] - peak);
      total += dst[c];
    }
    for (std::size_t c = 0; c < cols; ++c) dst[c] /= total;
  }
  auto y = out.data;
  return Tensor<T>::record("softmax_rows", std::move(out), {x},
                           [y = std::move(y), rows, cols](const std::vector<T>& g, detail::GradSinks<T>& s) {
                             for (std::size_t r = 0; r < rows; ++r) {
                               T dot{0};
                               for (std::size_t c = 0; c < cols; ++c) dot += y[r * cols + c] * g[r * cols + c];
                               for (std::size_t c = 0; c < cols; ++c)
                                 (*s[0])[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
                             }
                           });
}

/// Per-token normalization over channels followed by a per-channel affine map.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  detail::require_rank(x.shape(), 2, "layer_norm");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (gamma.size() != c || beta.size() != c) {
    throw DimensionError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not fit " + shape_str(x.shape()));
  }
  if (!(eps > T{0})) throw ConfigError("layer_norm: eps must be positive");
  std::vector<T> xhat(n * c), inv_std(n);
  Array<T> out(x.shape());
  auto in = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    T mu{0};
    for (std::size_t j = 0; j < c; ++j) mu += in[i * c + j];
    mu /= static_cast<T>(c);
    T var{0};
    for (std::size_t j = 0; j < c; ++j) var += (in[i * c + j] - mu) * (in[i * c + j] - mu);
    var /= static_cast<T>(c);
    inv_std[i] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (in[i * c + j] - mu) * inv_std[i];
      out.data[i * c + j] = gamma.data()[j] * xhat[i * c + j] + beta.data()[j];
    }
  }
  return Tensor<T>::record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [gamma, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c](const std::vector<T>& g, detail::GradSinks<T>& s) {
        auto gam = gamma.data();
        for (std::size_t i = 0; i < n; ++i) {
          if (s[0]) {
            T mean_d{0}, mean_dx{0};
            for (std::size_t j = 0; j < c; ++j) {
              const T d = g[i * c + j] * gam[j];
              mean_d += d;
              mean_dx += d * xhat[i * c + j];
            }
            mean_d /= static_cast<T>(c);
            mean_dx /= static_cast<T>(c);
            for (std::size_t j = 0; j < c; ++j) {
              const T d = g[i * c + j] * gam[j];
              (*s[0])[i * c + j] += inv_std[i] * (d - mean_d - xhat[i * c + j] * mean_dx);
            }
          }
          for (std::size_t j = 0; j < c; ++j) {
            if (s[1]) (*s[1])[j] += g[i * c + j] * xhat[i * c + j];
            if (s[2]) (*s[2])[j] += g[i * c + j];
          }
        }
      });
}

/// Mean over rows of the cross-entropy between softmax(logits[row]) and a
/// class index.
template <typename T>
Tensor<T> cross_entropy_rows(const Tensor<T>& logits, std::vector<std::size_t> labels) {
  detail::require_rank(logits.shape(), 2, "cross_entropy_rows");
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  if (labels.size() != n) throw DimensionError("cross_entropy_rows: label count does not match rows");
  std::vector<T> prob(n * m);
  T total{0};
  auto x = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= m) throw ContractError("cross_entropy_rows: label out of range");
    T peak = x[i * m];
    for (std::size_t j = 1; j < m; ++j) peak = std::max(peak, x[i * m + j]);
    T z{0};
    for (std::size_t j = 0; j < m; ++j) z += std::exp(x[i * m + j] - peak);
    for (std::size_t j = 0; j < m; ++j) prob[i * m + j] = std::exp(x[i * m + j] - peak) / z;
    total += std::log(z) + peak - x[i * m + labels[i]];
  }
  return Tensor<T>::record("cross_entropy_rows", Array<T>::scalar(total / static_cast<T>(n)), {logits},
                           [prob = std::move(prob), labels = std::move(labels), n, m](const std::vector<T>& g,
                                                                                        detail::GradSinks<T>& s) {
                             const T k = g[0] / static_cast<T>(n);
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < m; ++j)
                                 (*s[0])[i * m + j] += k * (prob[i * m + j] - (j == labels[i] ? T{1} : T{0}));
                           });
}

/// Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1].
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::vector<T> targets) {
  if (targets.size() != logits.size()) throw DimensionError("bce_with_logits: target count does not match logits");
  const std::size_t n = logits.size();
  T total{0};
  auto x = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    total += std::max(x[i], T{0}) - x[i] * targets[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  return Tensor<T>::record("bce_with_logits", Array<T>::scalar(total / static_cast<T>(n)), {logits},
                           [logits, targets = std::move(targets), n](const std::vector<T>& g, detail::GradSinks<T>& s) {
                             auto x = logits.data();
                             const T k = g[0] / static_cast<T>(n);
                             for (std::size_t i = 0; i < n; ++i) {
                               const T sig = T{1} / (T{1} + std::exp(-x[i]));
                               (*s[0])[i] += k * (sig - targets[i]);
                             }
                           });
}

/// Mean of 1 − IoU between boxes given as (left, top, right, bottom)
/// distances from a shared anchor point, one box per row of pred[m×4].
template <typename T>
Tensor<T> iou_loss(const Tensor<T>& pred, const Array<T>& target) {
  if (pred.rank() != 2 || pred.dim(1) != 4) throw DimensionError("iou_loss: predictions must be m×4, got " + shape_str(pred.shape()));
  detail::require_same(pred.shape(), target.shape, "iou_loss");
  const std::size_t m = pred.dim(0);
  auto p = pred.data();
  T total{0};
  for (std::size_t r = 0; r < m; ++r) {
    const T* a = &p[r * 4];
    const T* b = &target.data[r * 4];
    const T iw = std::min(a[0], b[0]) + std::min(a[2], b[2]);
    const T ih = std::min(a[1], b[1]) + std::min(a[3], b[3]);
    const T inter = iw * ih;
    const T uni = (a[0] + a[2]) * (a[1] + a[3]) + (b[0] + b[2]) * (b[1] + b[3]) - inter;
    total += T{1} - inter / uni;
  }
  return Tensor<T>::record(
      "iou_loss", Array<T>::scalar(total / static_cast<T>(m)), {pred},
      [pred, tgt = target.data, m](const std::vector<T>& g, detail::GradSinks<T>& s) {
        auto p = pred.data();
        const T k = g[0] / static_cast<T>(m);
        for (std::size_t r = 0; r < m; ++r) {
          const T* a = &p[r * 4];
          const T* b = &tgt[r * 4];
          const T iw = std::min(a[0], b[0]) + std::min(a[2], b[2]);
          const T ih = std::min(a[1], b[1]) + std::min(a[3], b[3]);
          const T inter = iw * ih;
          const T pw = a[0] + a[2], ph = a[1] + a[3];
          const T uni = pw * ph + (b[0] + b[2]) * (b[1] + b[3]) - inter;
          for (std::size_t c = 0; c < 4; ++c) {
            const bool horizontal = (c % 2) == 0;
            const T d_inter = a[c] < b[c] ? (horizontal ? ih : iw) : T{0};
            const T d_area = horizontal ? ph : pw;
            const T d_union = d_area - d_inter;
            const T d_iou = (d_inter * uni - inter * d_union) / (uni * uni);
            (*s[0])[r * 4 + c] -= k * d_iou;
          }
        }
      });
}

}  // namespace lpat
