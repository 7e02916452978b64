#pragma once

// Two local-recognition encoder layers followed by one global decoder layer.
//
//   enc1: T = LEC(M3, M4);  M̂ = Norm(MH-LRA(M4, M3, M3) + M4)
//         M_E1 = Norm(T + Norm(FFN(M̂) + M̂))
//   enc2: T = LEC(M_E1, M_E1);  M̂ = Norm(MH-LRA(M5, M_E1, M_E1) + M5)
//         M_E2 = Norm(T + Norm(FFN(M̂) + M̂))
//   dec : X = DIN(M5);  Q̂ = Norm(MHSA(X, X, X) + X);  T = LEC(Q̂, M_E2)
//         M̂ = Norm(MHA(Q̂, M_E2, M_E2) + Q̂);  M_D = Norm(T + Norm(FFN(M̂) + M̂))
//
// With paper_literal_residual set, enc2 adds M4 instead of M5 and the
// decoder drops the self-attention residual (Q̂ = Norm(MHSA(X, X, X))).

#include <string>

#include "lpat/detail_correction.hpp"
#include "lpat/error.hpp"
#include "lpat/local_attention.hpp"
#include "lpat/ops.hpp"
#include "lpat/params.hpp"
#include "lpat/tensor.hpp"

namespace lpat {

struct TransformerDims {
  std::size_t channels = 16;
  std::size_t heads = 2;
  std::size_t ffn_channels = 32;
  std::size_t generator_channels = 8;
  std::size_t window_enc1 = 3;
  std::size_t window_enc2 = 3;
  double norm_eps = 1e-5;
  bool paper_literal_residual = false;

  LecDims lec() const { return {channels, generator_channels}; }

  void validate() const {
    AttentionParams<double>::check_dims(channels, heads);
    lec().validate();
    if (ffn_channels == 0) throw ConfigError("ffn_channels must be positive");
    for (std::size_t k : {window_enc1, window_enc2})
      if (k == 0 || k % 2 == 0) throw ConfigError("window size k must be odd and >= 1, got " + std::to_string(k));
    if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be positive");
  }
};

template <typename T>
struct NormParams {
  Tensor<T> gamma, beta;

  static NormParams bind(ParamBinder<T>& b, const std::string& prefix) {
    return {b(prefix + ".gamma"), b(prefix + ".beta")};
  }
};

template <typename T>
struct FfnParams {
  Tensor<T> w1, b1, w2, b2;

  static void declare(ParamInit<T>& init, const std::string& prefix, std::size_t channels, std::size_t hidden) {
    init.linear(prefix + ".fc1", channels, hidden, true);
    init.linear(prefix + ".fc2", hidden, channels, true);
  }

  static FfnParams bind(ParamBinder<T>& b, const std::string& prefix) {
    return {b(prefix + ".fc1.w"), b(prefix + ".fc1.b"), b(prefix + ".fc2.w"), b(prefix + ".fc2.b")};
  }
};

/// Per-token c → c_ff → c map with a ReLU in between.
template <typename T>
Tensor<T> ffn(const Tensor<T>& x, const FfnParams<T>& p) {
  return add_row_bias(matmul(relu(add_row_bias(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

template <typename T>
Tensor<T> norm(const Tensor<T>& x, const NormParams<T>& p, double eps) {
  return layer_norm(x, p.gamma, p.beta, static_cast<T>(eps));
}

template <typename T>
struct EncoderLayerParams {
  AttentionParams<T> lra;
  LecParams<T> lec;
  FfnParams<T> ffn;
  NormParams<T> norm1, norm2, norm3;

  static void declare(ParamInit<T>& init, const std::string& prefix, const TransformerDims& d) {
    AttentionParams<T>::declare(init, prefix + ".lra", d.channels, d.heads);
    LecParams<T>::declare(init, prefix + ".lec", d.lec());
    FfnParams<T>::declare(init, prefix + ".ffn", d.channels, d.ffn_channels);
    for (const char* n : {".norm1", ".norm2", ".norm3"}) init.norm(prefix + n, d.channels);
  }

  static EncoderLayerParams bind(ParamBinder<T>& b, const std::string& prefix, const TransformerDims& d) {
    return {AttentionParams<T>::bind(b, prefix + ".lra", d.channels, d.heads), LecParams<T>::bind(b, prefix + ".lec"),
            FfnParams<T>::bind(b, prefix + ".ffn"), NormParams<T>::bind(b, prefix + ".norm1"),
            NormParams<T>::bind(b, prefix + ".norm2"), NormParams<T>::bind(b, prefix + ".norm3")};
  }
};

template <typename T>
struct DecoderLayerParams {
  DinParams<T> din;
  GlobalAttentionParams<T> self_attn, cross_attn;
  LecParams<T> lec;
  FfnParams<T> ffn;
  NormParams<T> norm1, norm2, norm3, norm4;

  static void declare(ParamInit<T>& init, const std::string& prefix, const TransformerDims& d) {
    DinParams<T>::declare(init, prefix + ".din", d.lec());
    GlobalAttentionParams<T>::declare(init, prefix + ".mhsa", d.channels, d.heads);
    GlobalAttentionParams<T>::declare(init, prefix + ".mha", d.channels, d.heads);
    LecParams<T>::declare(init, prefix + ".lec", d.lec());
    FfnParams<T>::declare(init, prefix + ".ffn", d.channels, d.ffn_channels);
    for (const char* n : {".norm1", ".norm2", ".norm3", ".norm4"}) init.norm(prefix + n, d.channels);
  }

  static DecoderLayerParams bind(ParamBinder<T>& b, const std::string& prefix, const TransformerDims& d) {
    return {DinParams<T>::bind(b, prefix + ".din"),
            GlobalAttentionParams<T>::bind(b, prefix + ".mhsa", d.channels, d.heads),
            GlobalAttentionParams<T>::bind(b, prefix + ".mha", d.channels, d.heads),
            LecParams<T>::bind(b, prefix + ".lec"),
            FfnParams<T>::bind(b, prefix + ".ffn"),
            NormParams<T>::bind(b, prefix + ".norm1"),
            NormParams<T>::bind(b, prefix + ".norm2"),
            NormParams<T>::bind(b, prefix + ".norm3"),
            NormParams<T>::bind(b, prefix + ".norm4")};
  }
};

template <typename T>
struct TransformerParams {
  EncoderLayerParams<T> enc1, enc2;
  DecoderLayerParams<T> dec;

  static void declare(ParamInit<T>& init, const TransformerDims& d) {
    d.validate();
    EncoderLayerParams<T>::declare(init, "enc1", d);
    EncoderLayerParams<T>::declare(init, "enc2", d);
    DecoderLayerParams<T>::declare(init, "dec", d);
  }

  static TransformerParams bind(ParamBinder<T>& b, const TransformerDims& d) {
    return {EncoderLayerParams<T>::bind(b, "enc1", d), EncoderLayerParams<T>::bind(b, "enc2", d),
            DecoderLayerParams<T>::bind(b, "dec", d)};
  }
};

namespace detail {

template <typename T>
void require_same_tokens(const Tensor<T>& a, const Tensor<T>& b, const char* where) {
  if (a.shape() != b.shape() || a.rank() != 2) {
    throw ContractError(std::string(where) + ": token sequences " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()) + " must share one n×c shape");
  }
}

/// Norm(T + Norm(FFN(M̂) + M̂)).
template <typename T>
Tensor<T> encoder_tail(const Tensor<T>& correction, const Tensor<T>& fused, const FfnParams<T>& f,
                       const NormParams<T>& inner, const NormParams<T>& outer, double eps) {
  return norm(add(correction, norm(add(ffn(fused, f), fused), inner, eps)), outer, eps);
}

}  // namespace detail

template <typename T>
Tensor<T> encoder_layer_1(const Tensor<T>& m3, const Tensor<T>& m4, const EncoderLayerParams<T>& p,
                          const ScopeMask& scope, const TransformerDims& d) {
  detail::require_same_tokens(m3, m4, "encoder_layer_1");
  auto correction = lec(m3, m4, p.lec, scope.height(), scope.width());
  auto fused = norm(add(mh_lra(m4, m3, m3, p.lra, scope), m4), p.norm1, d.norm_eps);
  return detail::encoder_tail(correction, fused, p.ffn, p.norm2, p.norm3, d.norm_eps);
}

/// residual_source is the term added after attention: M5 by default, or M4
/// under the literal-residual flag.
template <typename T>
Tensor<T> encoder_layer_2(const Tensor<T>& m5, const Tensor<T>& m_e1, const EncoderLayerParams<T>& p,
                          const ScopeMask& scope, const TransformerDims& d, const Tensor<T>* residual_source = nullptr) {
  detail::require_same_tokens(m5, m_e1, "encoder_layer_2");
  const Tensor<T>& residual = residual_source ? *residual_source : m5;
  detail::require_same_tokens(m5, residual, "encoder_layer_2");
  auto correction = lec(m_e1, m_e1, p.lec, scope.height(), scope.width());
  auto fused = norm(add(mh_lra(m5, m_e1, m_e1, p.lra, scope), residual), p.norm1, d.norm_eps);
  return detail::encoder_tail(correction, fused, p.ffn, p.norm2, p.norm3, d.norm_eps);
}

template <typename T>
Tensor<T> decoder_layer(const Tensor<T>& m5, const Tensor<T>& m_e2, const DecoderLayerParams<T>& p,
                        std::size_t height, std::size_t width, const TransformerDims& d) {
  detail::require_same_tokens(m5, m_e2, "decoder_layer");
  if (m5.dim(0) != height * width) throw ContractError("decoder_layer: token count does not match the grid");
  auto x = to_tokens(din(to_grid(m5, height, width), p.din));
  auto self = mha_global(x, x, x, p.self_attn);
  auto query = norm(d.paper_literal_residual ? self : add(self, x), p.norm1, d.norm_eps);
  auto correction = lec(query, m_e2, p.lec, height, width);
  auto fused = norm(add(mha_global(query, m_e2, m_e2, p.cross_attn), query), p.norm2, d.norm_eps);
  return detail::encoder_tail(correction, fused, p.ffn, p.norm3, p.norm4, d.norm_eps);
}

template <typename T>
Tensor<T> transformer_forward(const Tensor<T>& m3, const Tensor<T>& m4, const Tensor<T>& m5,
                              const TransformerParams<T>& p, std::size_t height, std::size_t width,
                              const TransformerDims& d) {
  detail::require_same_tokens(m3, m4, "transformer_forward");
  detail::require_same_tokens(m4, m5, "transformer_forward");
  const auto scope1 = ScopeMask::build(height, width, d.window_enc1);
  const auto scope2 = ScopeMask::build(height, width, d.window_enc2);
  auto m_e1 = encoder_layer_1(m3, m4, p.enc1, scope1, d);
  auto m_e2 = encoder_layer_2(m5, m_e1, p.enc2, scope2, d, d.paper_literal_residual ? &m4 : nullptr);
  return decoder_layer(m5, m_e2, p.dec, height, width, d);
}

}  // namespace lpat
