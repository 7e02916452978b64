#pragma once

// Full tracker: shared backbone → depth-wise correlation → transformer →
// prediction head.

#include <cstdint>
#include <optional>
#include <string>

#include "lpat/correlation.hpp"
#include "lpat/error.hpp"
#include "lpat/head.hpp"
#include "lpat/params.hpp"
#include "lpat/tensor.hpp"
#include "lpat/transformer.hpp"

namespace lpat {

struct ModelConfig {
  BackboneConfig backbone = BackboneConfig::toy();
  std::size_t template_size = 32;
  std::size_t search_size = 64;
  TransformerDims transformer;
  LossWeights loss;
  std::optional<double> center_radius;  ///< pixels; 1.5 × total stride when unset

  static ModelConfig paper_scale() {
    ModelConfig c;
    c.backbone = BackboneConfig::paper_scale();
    c.template_size = 127;
    c.search_size = 287;
    c.transformer.channels = c.backbone.channels();
    c.transformer.ffn_channels = 2 * c.transformer.channels;
    c.transformer.generator_channels = c.transformer.channels / 2;
    return c;
  }

  double stride() const { return static_cast<double>(backbone.total_stride()); }
  double radius() const { return center_radius.value_or(1.5 * stride()); }

  /// Response grid placement in search-crop pixels; validates the geometry.
  GridGeometry grid() const {
    if (template_size == 0 || search_size == 0) throw ConfigError("input sizes must be positive");
    if (template_size > search_size) throw ConfigError("input.template_size must not exceed input.search_size");
    const auto zt = backbone.extents(template_size);
    const auto xs = backbone.extents(search_size);
    const std::size_t n = xs[4] - zt[4] + 1;
    return {n, n, stride(), static_cast<double>(template_size) / 2.0};
  }

  void validate() const {
    backbone.validate();
    transformer.validate();
    if (transformer.channels != backbone.channels()) {
      throw ConfigError("attention.channels (" + std::to_string(transformer.channels) +
                        ") must equal the backbone output channels (" + std::to_string(backbone.channels()) + ")");
    }
    if (loss.cls1 < 0 || loss.cls2 < 0 || loss.reg < 0) throw ConfigError("head.lambda* must be non-negative");
    if (!(radius() > 0)) throw ConfigError("head.center_radius must be positive");
    grid();
  }
};

template <typename T>
ModelParams<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams<T> params;
  ParamInit<T> init(params, seed);
  BackboneParams<T>::declare(init, cfg.backbone);
  TransformerParams<T>::declare(init, cfg.transformer);
  HeadParams<T>::declare(init, cfg.transformer.channels);
  return params;
}

/// Throws ConfigError unless params hold exactly the tensors cfg declares,
/// with matching shapes.
template <typename T>
void check_weights(const ModelParams<T>& params, const ModelConfig& cfg) {
  const auto expected = init_model<T>(cfg, 0);
  for (const auto& [name, value] : expected) {
    if (!params.contains(name)) throw ConfigError("weights lack tensor '" + name + "'");
    if (params.at(name).shape != value.shape) {
      throw ConfigError("weight '" + name + "' has shape " + shape_str(params.at(name).shape) + ", config expects " +
                        shape_str(value.shape));
    }
  }
  for (const auto& [name, value] : params)
    if (!expected.contains(name)) throw ConfigError("weights hold unexpected tensor '" + name + "'");
}

template <typename T>
struct ModelView {
  BackboneParams<T> backbone;
  TransformerParams<T> transformer;
  HeadParams<T> head;

  static ModelView bind(ParamBinder<T>& b, const ModelConfig& cfg) {
    return {BackboneParams<T>::bind(b), TransformerParams<T>::bind(b, cfg.transformer), HeadParams<T>::bind(b)};
  }
};

template <typename T>
struct ForwardResult {
  CorrelationTokens<T> tokens;
  Tensor<T> decoded;  ///< M_D
  HeadOutput<T> head;
  GridGeometry grid;
};

template <typename T>
ForwardResult<T> model_forward(const ModelView<T>& m, const ModelConfig& cfg, const Tensor<T>& templ,
                               const Tensor<T>& search) {
  ForwardResult<T> r;
  r.grid = cfg.grid();
  r.tokens = correlation_pyramid(templ, search, m.backbone, cfg.backbone);
  if (r.tokens.height != r.grid.rows || r.tokens.width != r.grid.cols) {
    throw ContractError("model_forward: response grid does not match the configured geometry");
  }
  r.decoded = transformer_forward(r.tokens.m[0], r.tokens.m[1], r.tokens.m[2], m.transformer, r.tokens.height,
                                  r.tokens.width, cfg.transformer);
  r.head = head_forward(r.decoded, m.head, r.tokens.height, r.tokens.width);
  return r;
}

}  // namespace lpat
