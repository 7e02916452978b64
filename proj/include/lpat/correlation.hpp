#pragma once

// Weight-shared five-layer convolutional backbone, depth-wise
// cross-correlation and tokenization of the last three levels.

#include <array>
#include <string>
#include <vector>

#include "lpat/error.hpp"
#include "lpat/ops.hpp"
#include "lpat/params.hpp"
#include "lpat/tensor.hpp"

namespace lpat {

struct ConvSpec {
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
};

struct BackboneConfig {
  std::size_t in_channels = 3;
  std::array<ConvSpec, 5> layers{};

  /// 3→8→16→16→16→16 with two stride-2 stages; 32×32 gives 6×6 at levels 3-5.
  static BackboneConfig toy() {
    BackboneConfig c;
    c.layers = {ConvSpec{8, 4, 2, 0}, ConvSpec{16, 3, 2, 0}, ConvSpec{16, 2, 1, 0}, ConvSpec{16, 3, 1, 1},
                ConvSpec{16, 3, 1, 1}};
    return c;
  }

  /// AlexNet-like geometry for 127/287 crops (stride 8, 13×13 and 33×33 at
  /// levels 3-5).
  static BackboneConfig paper_scale() {
    BackboneConfig c;
    c.layers = {ConvSpec{96, 11, 2, 0}, ConvSpec{256, 5, 2, 0}, ConvSpec{256, 4, 2, 0}, ConvSpec{256, 3, 1, 1},
                ConvSpec{256, 3, 1, 1}};
    return c;
  }

  std::size_t channels() const { return layers[4].out_channels; }

  std::size_t total_stride() const {
    std::size_t s = 1;
    for (const auto& l : layers) s *= l.stride;
    return s;
  }

  /// Spatial extent after each layer for a square input; throws ConfigError
  /// when a layer does not tile exactly or levels 3-5 disagree.
  std::array<std::size_t, 5> extents(std::size_t input) const {
    std::array<std::size_t, 5> out{};
    std::size_t cur = input;
    for (std::size_t i = 0; i < 5; ++i) {
      try {
        cur = conv_output_extent(cur, layers[i].kernel, layers[i].stride, layers[i].pad);
      } catch (const ConfigError& e) {
        throw ConfigError("backbone layer " + std::to_string(i + 1) + " on input " + std::to_string(input) + ": " +
                          e.what());
      }
      out[i] = cur;
    }
    validate();
    if (out[2] != out[3] || out[3] != out[4]) {
      throw ConfigError("backbone levels 3-5 must share one spatial size for input " + std::to_string(input));
    }
    return out;
  }

  void validate() const {
    for (std::size_t i = 0; i < 5; ++i) {
      if (layers[i].out_channels == 0 || layers[i].kernel == 0 || layers[i].stride == 0) {
        throw ConfigError("backbone layer " + std::to_string(i + 1) + " has a zero channel, kernel or stride");
      }
    }
    if (layers[2].out_channels != layers[3].out_channels || layers[3].out_channels != layers[4].out_channels) {
      throw ConfigError("backbone levels 3-5 must share one channel count");
    }
  }
};

template <typename T>
struct BackboneParams {
  std::array<Tensor<T>, 5> w, b;

  static void declare(ParamInit<T>& init, const BackboneConfig& cfg) {
    cfg.validate();
    std::size_t in = cfg.in_channels;
    for (std::size_t i = 0; i < 5; ++i) {
      const auto& l = cfg.layers[i];
      init.conv("backbone.conv" + std::to_string(i + 1), l.out_channels, in, l.kernel, l.kernel);
      in = l.out_channels;
    }
  }

  static BackboneParams bind(ParamBinder<T>& b) {
    BackboneParams p;
    for (std::size_t i = 0; i < 5; ++i) {
      p.w[i] = b("backbone.conv" + std::to_string(i + 1) + ".w");
      p.b[i] = b("backbone.conv" + std::to_string(i + 1) + ".b");
    }
    return p;
  }
};

/// Activations of backbone levels 3, 4 and 5.
template <typename T>
struct FeatureLevels {
  std::array<Tensor<T>, 3> level;
};

template <typename T>
struct FeaturePyramid {
  FeatureLevels<T> templ, search;
};

/// ReLU follows layers 1-4; layer 5 stays linear.
template <typename T>
FeatureLevels<T> backbone_forward(const Tensor<T>& image, const BackboneParams<T>& p, const BackboneConfig& cfg) {
  if (image.rank() != 3 || image.dim(0) != cfg.in_channels) {
    throw ConfigError("backbone: image " + shape_str(image.shape()) + " does not have " +
                      std::to_string(cfg.in_channels) + " channels");
  }
  if (image.dim(1) != image.dim(2)) throw ConfigError("backbone: image must be square, got " + shape_str(image.shape()));
  cfg.extents(image.dim(1));
  FeatureLevels<T> out;
  Tensor<T> x = image;
  for (std::size_t i = 0; i < 5; ++i) {
    x = add_channel_bias(conv2d(x, p.w[i], cfg.layers[i].stride, cfg.layers[i].pad), p.b[i]);
    if (i < 4) x = relu(x);
    if (i >= 2) out.level[i - 2] = x;
  }
  return out;
}

template <typename T>
Tensor<T> dwc(const Tensor<T>& templ, const Tensor<T>& search) {
  return depthwise_xcorr(templ, search);
}

/// M3, M4, M5 over one shared response grid.
template <typename T>
struct CorrelationTokens {
  std::array<Tensor<T>, 3> m;
  std::size_t height = 0, width = 0;
};

template <typename T>
CorrelationTokens<T> correlation_pyramid(const Tensor<T>& templ_image, const Tensor<T>& search_image,
                                         const BackboneParams<T>& p, const BackboneConfig& cfg) {
  const auto z = backbone_forward(templ_image, p, cfg);
  const auto x = backbone_forward(search_image, p, cfg);
  CorrelationTokens<T> out;
  for (std::size_t i = 0; i < 3; ++i) {
    auto r = dwc(z.level[i], x.level[i]);
    if (i == 0) {
      out.height = r.dim(1);
      out.width = r.dim(2);
    } else if (r.dim(1) != out.height || r.dim(2) != out.width) {
      throw ContractError("correlation_pyramid: response grids of levels 3-5 differ");
    }
    out.m[i] = to_tokens(r);
  }
  return out;
}

}  // namespace lpat
