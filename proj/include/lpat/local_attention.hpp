#pragma once

// Local-recognition attention: each query token attends only to the keys in
// a k×k window centred on its own grid cell. Scores are computed for window
// members alone (Σ|scope(i)| dot products), so time and memory grow
// linearly with the token count for fixed k.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "lpat/error.hpp"
#include "lpat/ops.hpp"
#include "lpat/params.hpp"
#include "lpat/tensor.hpp"

namespace lpat {

/// Per-query key sets of a k×k window on an H×W token grid (row-major
/// token index ↔ (row, col)). Windows are clipped at the borders.
class ScopeMask {
 public:
  static ScopeMask build(std::size_t height, std::size_t width, std::size_t k) {
    if (height == 0 || width == 0) throw ConfigError("scope grid must be at least 1x1");
    if (k == 0 || k % 2 == 0) throw ConfigError("window size k must be odd and >= 1, got " + std::to_string(k));
    ScopeMask m;
    m.height_ = height;
    m.width_ = width;
    m.k_ = k;
    const auto half = static_cast<std::ptrdiff_t>(k / 2);
    const auto h = static_cast<std::ptrdiff_t>(height), w = static_cast<std::ptrdiff_t>(width);
    m.offsets_.reserve(height * width + 1);
    m.offsets_.push_back(0);
    for (std::ptrdiff_t r = 0; r < h; ++r)
      for (std::ptrdiff_t c = 0; c < w; ++c) {
        for (std::ptrdiff_t rr = std::max<std::ptrdiff_t>(0, r - half); rr <= std::min(h - 1, r + half); ++rr)
          for (std::ptrdiff_t cc = std::max<std::ptrdiff_t>(0, c - half); cc <= std::min(w - 1, c + half); ++cc)
            m.indices_.push_back(static_cast<std::uint32_t>(rr * w + cc));
        m.offsets_.push_back(m.indices_.size());
      }
    return m;
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t window() const noexcept { return k_; }
  std::size_t tokens() const noexcept { return height_ * width_; }

  /// Key indices visible to query i, ascending.
  std::span<const std::uint32_t> scope(std::size_t i) const {
    return std::span<const std::uint32_t>(indices_).subspan(offsets_[i], offsets_[i + 1] - offsets_[i]);
  }

  bool contains(std::size_t i, std::size_t j) const {
    const auto half = static_cast<std::ptrdiff_t>(k_ / 2);
    const auto ri = static_cast<std::ptrdiff_t>(i / width_), ci = static_cast<std::ptrdiff_t>(i % width_);
    const auto rj = static_cast<std::ptrdiff_t>(j / width_), cj = static_cast<std::ptrdiff_t>(j % width_);
    return std::abs(ri - rj) <= half && std::abs(ci - cj) <= half;
  }

  /// Σ_i |scope(i)|.
  std::size_t total() const noexcept { return indices_.size(); }

  std::span<const std::size_t> offsets() const noexcept { return offsets_; }
  std::span<const std::uint32_t> indices() const noexcept { return indices_; }

 private:
  std::size_t height_ = 0, width_ = 0, k_ = 0;
  std::vector<std::size_t> offsets_;
  std::vector<std::uint32_t> indices_;
};

/// Counts executed local score dot products.
namespace instrument {
inline std::atomic<std::uint64_t>& local_score_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}
inline std::uint64_t local_scores() { return local_score_counter().load(); }
inline void reset_local_scores() { local_score_counter().store(0); }
}  // namespace instrument

/// Attention weights in compressed-row form, laid out like ScopeMask.
template <typename T>
struct SparseRows {
  std::vector<std::size_t> offsets;
  std::vector<std::uint32_t> cols;
  std::vector<T> values;
};

namespace detail {

/// Runs fn(begin, end) over [0, n) split across the configured thread count.
/// Each row is owned by exactly one worker, so results do not depend on the
/// split.
template <typename Fn>
void parallel_rows(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(runtime::threads(), n);
  if (workers <= 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t b = w * chunk, e = std::min(n, b + chunk);
    if (b < e) pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace detail

/// Unscaled scores q_i·k_j for every j in scope(i), written in scope order
/// to out (length scope.total()). q and k are n×d row-major.
template <typename T>
void local_scores(std::span<const T> q, std::span<const T> k, std::size_t d, const ScopeMask& scope,
                  std::span<T> out) {
  const auto offsets = scope.offsets();
  const auto idx = scope.indices();
  detail::parallel_rows(scope.tokens(), [&](std::size_t begin, std::size_t end) {
    std::uint64_t executed = 0;
    for (std::size_t i = begin; i < end; ++i) {
      const T* qi = &q[i * d];
      for (std::size_t e = offsets[i]; e < offsets[i + 1]; ++e) {
        const T* kj = &k[idx[e] * d];
        T acc{0};
        for (std::size_t l = 0; l < d; ++l) acc += qi[l] * kj[l];
        out[e] = acc;
        ++executed;
      }
    }
    instrument::local_score_counter().fetch_add(executed, std::memory_order_relaxed);
  });
}

/// Dense scores q_i·k_j over all pairs; out is n_q×n_k.
template <typename T>
void dense_scores(std::span<const T> q, std::span<const T> k, std::size_t nq, std::size_t nk, std::size_t d,
                  std::span<T> out) {
  for (std::size_t i = 0; i < nq; ++i) {
    const T* qi = &q[i * d];
    for (std::size_t j = 0; j < nk; ++j) {
      const T* kj = &k[j * d];
      T acc{0};
      for (std::size_t l = 0; l < d; ++l) acc += qi[l] * kj[l];
      out[i * nk + j] = acc;
    }
  }
}

/// Windowed attention over pre-embedded q[n×d], k[n×d], v[n×dv]. Only
/// in-scope scores are formed; weights_out, if given, receives the
/// normalized weights.
template <typename T>
Tensor<T> local_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const ScopeMask& scope,
                          SparseRows<T>* weights_out = nullptr) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) throw DimensionError("local_attention: inputs must be 2-D");
  const std::size_t n = q.dim(0), d = q.dim(1), dv = v.dim(1);
  if (k.dim(0) != n || v.dim(0) != n || k.dim(1) != d) {
    throw DimensionError("local_attention: incompatible q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()));
  }
  if (scope.tokens() != n) {
    throw ContractError("local_attention: scope grid " + std::to_string(scope.height()) + "x" +
                        std::to_string(scope.width()) + " does not cover " + std::to_string(n) + " tokens");
  }
  const auto offsets = scope.offsets();
  const auto idx = scope.indices();
  std::vector<T> prob(scope.total());
  local_scores<T>(q.data(), k.data(), d, scope, prob);

  Array<T> out(Shape{n, dv});
  auto V = v.data();
  detail::parallel_rows(n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const std::size_t b = offsets[i], e = offsets[i + 1];
      T peak = prob[b];
      for (std::size_t t = b + 1; t < e; ++t) peak = std::max(peak, prob[t]);
      T total{0};
      for (std::size_t t = b; t < e; ++t) {
        prob[t] = std::exp(prob[t] - peak);
        total += prob[t];
      }
      T* row = &out.data[i * dv];
      for (std::size_t t = b; t < e; ++t) {
        prob[t] /= total;
        const T* vj = &V[idx[t] * dv];
        for (std::size_t l = 0; l < dv; ++l) row[l] += prob[t] * vj[l];
      }
    }
  });
  if (weights_out) {
    weights_out->offsets.assign(offsets.begin(), offsets.end());
    weights_out->cols.assign(idx.begin(), idx.end());
    weights_out->values = prob;
  }

  return Tensor<T>::record(
      "local_attention", std::move(out), {q, k, v},
      [q, k, v, scope, prob = std::move(prob), n, d, dv](const std::vector<T>& g, detail::GradSinks<T>& s) {
        const auto offsets = scope.offsets();
        const auto idx = scope.indices();
        auto Q = q.data();
        auto K = k.data();
        auto V = v.data();
        std::vector<T> dp;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t b = offsets[i], e = offsets[i + 1];
          const T* gi = &g[i * dv];
          dp.assign(e - b, T{0});
          T weighted{0};
          for (std::size_t t = b; t < e; ++t) {
            const std::size_t j = idx[t];
            T acc{0};
            for (std::size_t l = 0; l < dv; ++l) acc += gi[l] * V[j * dv + l];
            dp[t - b] = acc;
            weighted += prob[t] * acc;
            if (s[2])
              for (std::size_t l = 0; l < dv; ++l) (*s[2])[j * dv + l] += prob[t] * gi[l];
          }
          for (std::size_t t = b; t < e; ++t) {
            const std::size_t j = idx[t];
            const T ds = prob[t] * (dp[t - b] - weighted);
            if (s[0])
              for (std::size_t l = 0; l < d; ++l) (*s[0])[i * d + l] += ds * K[j * d + l];
            if (s[1])
              for (std::size_t l = 0; l < d; ++l) (*s[1])[j * d + l] += ds * Q[i * d + l];
          }
        }
      });
}

/// Brute-force reference for local_attention: full n×n score matrix,
/// masked-score sentinel outside the scope, dense row softmax. O(n²) on
/// purpose.
template <typename T>
Tensor<T> masked_oracle(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const ScopeMask& scope,
                        Array<T>* weights_out = nullptr) {
  const std::size_t n = q.dim(0);
  if (scope.tokens() != n || k.dim(0) != n) {
    throw ContractError("masked_oracle: scope covers " + std::to_string(scope.tokens()) + " tokens, inputs have " +
                        std::to_string(n));
  }
  std::vector<std::uint8_t> keep(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) keep[i * n + j] = scope.contains(i, j) ? 1 : 0;
  auto p = softmax_rows(mask_fill(matmul(q, transpose(k)), std::move(keep)));
  if (weights_out) *weights_out = p.value();
  return matmul(p, v);
}

/// Learnable tensors of one multi-head local-recognition attention block.
/// phi_q / phi_k are 3×3 channel-preserving convolutions shared across heads;
/// head j scores on channel slice [j·d, (j+1)·d) of their outputs.
template <typename T>
struct AttentionParams {
  std::size_t channels = 0;
  std::size_t heads = 0;
  Tensor<T> phi_q_w, phi_q_b, phi_k_w;  ///< phi_k has no bias
  std::vector<Tensor<T>> w_v;  ///< per head, c×d
  Tensor<T> w_o;               ///< c×c

  std::size_t head_dim() const { return channels / heads; }

  static void check_dims(std::size_t channels, std::size_t heads) {
    if (heads == 0 || channels == 0 || channels % heads != 0) {
      throw ConfigError("attention channels (" + std::to_string(channels) + ") must be a positive multiple of heads (" +
                        std::to_string(heads) + ")");
    }
  }

  static void declare(ParamInit<T>& init, const std::string& prefix, std::size_t channels, std::size_t heads) {
    check_dims(channels, heads);
    init.conv(prefix + ".phi_q", channels, channels, 3, 3);
    init.conv(prefix + ".phi_k", channels, channels, 3, 3, false);
    for (std::size_t j = 0; j < heads; ++j)
      init.linear(prefix + ".w_v." + std::to_string(j), channels, channels / heads, false);
    init.linear(prefix + ".w_o", channels, channels, false);
  }

  static AttentionParams bind(ParamBinder<T>& b, const std::string& prefix, std::size_t channels, std::size_t heads) {
    check_dims(channels, heads);
    AttentionParams p;
    p.channels = channels;
    p.heads = heads;
    p.phi_q_w = b(prefix + ".phi_q.w");
    p.phi_q_b = b(prefix + ".phi_q.b");
    p.phi_k_w = b(prefix + ".phi_k.w");
    for (std::size_t j = 0; j < heads; ++j) p.w_v.push_back(b(prefix + ".w_v." + std::to_string(j)));
    p.w_o = b(prefix + ".w_o");
    return p;
  }
};

/// Applies a 3×3 stride-1 pad-1 convolution to a token sequence laid out on
/// an H×W grid. b may be an undefined tensor.
template <typename T>
Tensor<T> conv_embed(const Tensor<T>& tokens, const Tensor<T>& w, const Tensor<T>& b, std::size_t height,
                     std::size_t width) {
  auto y = conv2d(to_grid(tokens, height, width), w, 1, 1);
  return to_tokens(b.defined() ? add_channel_bias(y, b) : y);
}

namespace detail {

template <typename T>
void check_lra_inputs(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionParams<T>& params,
                      const ScopeMask& scope) {
  for (const auto* t : {&q, &k, &v}) {
    if (t->rank() != 2 || t->dim(1) != params.channels) {
      throw DimensionError("mh_lra: token sequence " + shape_str(t->shape()) + " does not have " +
                           std::to_string(params.channels) + " channels");
    }
  }
  if (q.dim(0) != k.dim(0) || k.dim(0) != v.dim(0)) throw ContractError("mh_lra: Q, K and V token counts differ");
  if (scope.tokens() != q.dim(0)) {
    throw ContractError("mh_lra: scope grid " + std::to_string(scope.height()) + "x" + std::to_string(scope.width()) +
                        " does not match " + std::to_string(q.dim(0)) + " tokens");
  }
}

}  // namespace detail

/// Embedded query/key sequences shared by every head.
template <typename T>
struct LraEmbeddings {
  Tensor<T> q, k;
};

template <typename T>
LraEmbeddings<T> lra_embed(const Tensor<T>& q, const Tensor<T>& k, const AttentionParams<T>& params,
                           const ScopeMask& scope) {
  return {conv_embed(q, params.phi_q_w, params.phi_q_b, scope.height(), scope.width()),
          conv_embed(k, params.phi_k_w, Tensor<T>{}, scope.height(), scope.width())};
}

template <typename T>
Tensor<T> lra_head(const LraEmbeddings<T>& emb, const Tensor<T>& v, const AttentionParams<T>& params, std::size_t head,
                   const ScopeMask& scope, SparseRows<T>* weights_out = nullptr) {
  const std::size_t d = params.head_dim();
  auto qh = slice(emb.q, 1, head * d, (head + 1) * d);
  auto kh = slice(emb.k, 1, head * d, (head + 1) * d);
  return local_attention(qh, kh, matmul(v, params.w_v.at(head)), scope, weights_out);
}

/// One local-recognition attention head.
template <typename T>
Tensor<T> lra_head(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionParams<T>& params,
                   std::size_t head, const ScopeMask& scope, SparseRows<T>* weights_out = nullptr) {
  detail::check_lra_inputs(q, k, v, params, scope);
  if (head >= params.heads) throw ContractError("lra_head: head index out of range");
  return lra_head(lra_embed(q, k, params, scope), v, params, head, scope, weights_out);
}

/// Multi-head local-recognition attention: heads concatenated on channels,
/// then projected by w_o.
template <typename T>
Tensor<T> mh_lra(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionParams<T>& params,
                 const ScopeMask& scope, std::vector<SparseRows<T>>* weights_out = nullptr) {
  detail::check_lra_inputs(q, k, v, params, scope);
  auto emb = lra_embed(q, k, params, scope);
  std::vector<Tensor<T>> heads;
  if (weights_out) weights_out->assign(params.heads, {});
  for (std::size_t j = 0; j < params.heads; ++j)
    heads.push_back(lra_head(emb, v, params, j, scope, weights_out ? &(*weights_out)[j] : nullptr));
  auto cat = params.heads == 1 ? heads[0] : concat(heads, 1);
  return matmul(cat, params.w_o);
}

/// Learnable tensors of standard multi-head attention (c×c projections with
/// biases; head j uses column slice j).
template <typename T>
struct GlobalAttentionParams {
  std::size_t channels = 0;
  std::size_t heads = 0;
  Tensor<T> w_q, b_q, w_k, w_v, b_v, w_o, b_o;  ///< w_k has no bias

  std::size_t head_dim() const { return channels / heads; }

  static void declare(ParamInit<T>& init, const std::string& prefix, std::size_t channels, std::size_t heads) {
    AttentionParams<T>::check_dims(channels, heads);
    for (const char* name : {"w_q", "w_k", "w_v", "w_o"})
      init.linear(prefix + "." + name, channels, channels, std::string(name) != "w_k");
  }

  static GlobalAttentionParams bind(ParamBinder<T>& b, const std::string& prefix, std::size_t channels,
                                    std::size_t heads) {
    AttentionParams<T>::check_dims(channels, heads);
    GlobalAttentionParams p;
    p.channels = channels;
    p.heads = heads;
    p.w_q = b(prefix + ".w_q.w");
    p.b_q = b(prefix + ".w_q.b");
    p.w_k = b(prefix + ".w_k");
    p.w_v = b(prefix + ".w_v.w");
    p.b_v = b(prefix + ".w_v.b");
    p.w_o = b(prefix + ".w_o.w");
    p.b_o = b(prefix + ".w_o.b");
    return p;
  }
};

/// Scaled dot-product multi-head attention over all keys; q is n_q×c, k and
/// v are n_kv×c.
template <typename T>
Tensor<T> mha_global(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const GlobalAttentionParams<T>& params) {
  for (const auto* t : {&q, &k, &v}) {
    if (t->rank() != 2 || t->dim(1) != params.channels) {
      throw ContractError("mha_global: token sequence " + shape_str(t->shape()) + " does not have " +
                          std::to_string(params.channels) + " channels");
    }
  }
  if (k.dim(0) != v.dim(0)) throw ContractError("mha_global: key and value counts differ");
  const std::size_t d = params.head_dim();
  const T inv_sqrt_d = T{1} / std::sqrt(static_cast<T>(d));
  auto qp = add_row_bias(matmul(q, params.w_q), params.b_q);
  auto kp = matmul(k, params.w_k);
  auto vp = add_row_bias(matmul(v, params.w_v), params.b_v);
  std::vector<Tensor<T>> heads;
  for (std::size_t j = 0; j < params.heads; ++j) {
    auto qh = params.heads == 1 ? qp : slice(qp, 1, j * d, (j + 1) * d);
    auto kh = params.heads == 1 ? kp : slice(kp, 1, j * d, (j + 1) * d);
    auto vh = params.heads == 1 ? vp : slice(vp, 1, j * d, (j + 1) * d);
    auto p = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_d));
    heads.push_back(matmul(p, vh));
  }
  auto cat = params.heads == 1 ? heads[0] : concat(heads, 1);
  return add_row_bias(matmul(cat, params.w_o), params.b_o);
}

}  // namespace lpat
