#pragma once

// Local element correction. Two inception-style element generators look at
// the same feature map through different receptive fields; their outputs
// are fused back into the map through a residual projection (the
// detail-inquiry net, DIN). LEC feeds DIN with a 1×1 projection of the
// channel-concatenated query and key maps.
//
// Generator paths (each path has path_channels = generator_channels / 2
// outputs, every convolution followed by ReLU):
//   EG_I : 1×1            | 3×3
//   EG_II: 1×1 → 3×3      | 1×1 → 5×5

#include <string>
#include <vector>

#include "lpat/error.hpp"
#include "lpat/ops.hpp"
#include "lpat/params.hpp"
#include "lpat/tensor.hpp"

namespace lpat {

enum class GeneratorKind { small_kernels, large_kernels };

template <typename T>
struct ConvLayer {
  Tensor<T> w, b;
  std::size_t pad = 0;

  Tensor<T> operator()(const Tensor<T>& x) const { return add_channel_bias(conv2d(x, w, 1, pad), b); }

  static ConvLayer bind(ParamBinder<T>& binder, const std::string& prefix) {
    ConvLayer c{binder(prefix + ".w"), binder(prefix + ".b")};
    c.pad = c.w.dim(2) / 2;
    return c;
  }
};

struct LecDims {
  std::size_t channels = 0;
  std::size_t generator_channels = 0;  ///< output channels of one generator

  std::size_t path_channels() const { return generator_channels / 2; }

  void validate() const {
    if (channels == 0) throw ConfigError("lec: channel count must be positive");
    if (generator_channels < 2 || generator_channels % 2 != 0) {
      throw ConfigError("lec: generator_channels must be even and >= 2, got " + std::to_string(generator_channels));
    }
    if (generator_channels >= channels) {
      throw ConfigError("lec: generator_channels (" + std::to_string(generator_channels) +
                        ") must be smaller than channels (" + std::to_string(channels) + ")");
    }
  }
};

template <typename T>
struct GeneratorParams {
  GeneratorKind kind = GeneratorKind::small_kernels;
  // small_kernels: path_a = 1×1, path_b = 3×3.
  // large_kernels: path_a = 1×1 → 3×3, path_b = 1×1 → 5×5.
  ConvLayer<T> a_reduce, a_conv, b_reduce, b_conv;

  static void declare(ParamInit<T>& init, const std::string& prefix, GeneratorKind kind, const LecDims& dims) {
    const std::size_t c = dims.channels, p = dims.path_channels();
    if (kind == GeneratorKind::small_kernels) {
      init.conv(prefix + ".path1x1", p, c, 1, 1);
      init.conv(prefix + ".path3x3", p, c, 3, 3);
    } else {
      init.conv(prefix + ".path3x3.reduce", p, c, 1, 1);
      init.conv(prefix + ".path3x3.conv", p, p, 3, 3);
      init.conv(prefix + ".path5x5.reduce", p, c, 1, 1);
      init.conv(prefix + ".path5x5.conv", p, p, 5, 5);
    }
  }

  static GeneratorParams bind(ParamBinder<T>& b, const std::string& prefix, GeneratorKind kind) {
    GeneratorParams g;
    g.kind = kind;
    if (kind == GeneratorKind::small_kernels) {
      g.a_conv = ConvLayer<T>::bind(b, prefix + ".path1x1");
      g.b_conv = ConvLayer<T>::bind(b, prefix + ".path3x3");
    } else {
      g.a_reduce = ConvLayer<T>::bind(b, prefix + ".path3x3.reduce");
      g.a_conv = ConvLayer<T>::bind(b, prefix + ".path3x3.conv");
      g.b_reduce = ConvLayer<T>::bind(b, prefix + ".path5x5.reduce");
      g.b_conv = ConvLayer<T>::bind(b, prefix + ".path5x5.conv");
    }
    return g;
  }

  std::size_t input_channels() const {
    return (kind == GeneratorKind::small_kernels ? a_conv : a_reduce).w.dim(1);
  }

  std::size_t output_channels() const { return a_conv.w.dim(0) + b_conv.w.dim(0); }
};

template <typename T>
Tensor<T> element_generator(const Tensor<T>& x, const GeneratorParams<T>& g) {
  if (x.rank() != 3 || x.dim(0) != g.input_channels()) {
    throw ConfigError("element_generator: input " + shape_str(x.shape()) + " does not match generator input channels " +
                      std::to_string(g.input_channels()));
  }
  Tensor<T> a, b;
  if (g.kind == GeneratorKind::small_kernels) {
    a = relu(g.a_conv(x));
    b = relu(g.b_conv(x));
  } else {
    a = relu(g.a_conv(relu(g.a_reduce(x))));
    b = relu(g.b_conv(relu(g.b_reduce(x))));
  }
  return concat<T>({a, b}, 0);
}

template <typename T>
struct DinParams {
  GeneratorParams<T> eg1, eg2;
  ConvLayer<T> proj_out;

  static void declare(ParamInit<T>& init, const std::string& prefix, const LecDims& dims) {
    dims.validate();
    GeneratorParams<T>::declare(init, prefix + ".eg1", GeneratorKind::small_kernels, dims);
    GeneratorParams<T>::declare(init, prefix + ".eg2", GeneratorKind::large_kernels, dims);
    init.conv(prefix + ".proj_out", dims.channels, 2 * dims.generator_channels, 1, 1);
  }

  static DinParams bind(ParamBinder<T>& b, const std::string& prefix) {
    DinParams p{GeneratorParams<T>::bind(b, prefix + ".eg1", GeneratorKind::small_kernels),
                GeneratorParams<T>::bind(b, prefix + ".eg2", GeneratorKind::large_kernels),
                ConvLayer<T>::bind(b, prefix + ".proj_out")};
    if (p.eg1.output_channels() + p.eg2.output_channels() != p.proj_out.w.dim(1)) {
      throw ConfigError("din '" + prefix + "': generator outputs (" +
                        std::to_string(p.eg1.output_channels() + p.eg2.output_channels()) +
                        ") do not match exit projection inputs (" + std::to_string(p.proj_out.w.dim(1)) + ")");
    }
    return p;
  }
};

/// x + Proj(Cat(EG_I(x), EG_II(x))) on a C×H×W map.
template <typename T>
Tensor<T> din(const Tensor<T>& x, const DinParams<T>& p) {
  auto fused = concat<T>({element_generator(x, p.eg1), element_generator(x, p.eg2)}, 0);
  return add(x, p.proj_out(fused));
}

template <typename T>
struct LecParams {
  ConvLayer<T> proj_in;
  DinParams<T> din;

  static void declare(ParamInit<T>& init, const std::string& prefix, const LecDims& dims) {
    dims.validate();
    init.conv(prefix + ".proj_in", dims.channels, 2 * dims.channels, 1, 1);
    DinParams<T>::declare(init, prefix, dims);
  }

  static LecParams bind(ParamBinder<T>& b, const std::string& prefix) {
    return {ConvLayer<T>::bind(b, prefix + ".proj_in"), DinParams<T>::bind(b, prefix)};
  }
};

/// Detail-correction map for two n×c token sequences on an H×W grid.
template <typename T>
Tensor<T> lec(const Tensor<T>& q, const Tensor<T>& k, const LecParams<T>& p, std::size_t height, std::size_t width) {
  if (q.shape() != k.shape()) {
    throw ContractError("lec: query " + shape_str(q.shape()) + " and key " + shape_str(k.shape()) + " differ");
  }
  if (q.rank() != 2 || q.dim(0) != height * width) {
    throw ContractError("lec: " + shape_str(q.shape()) + " is not a token sequence over a " + std::to_string(height) +
                        "x" + std::to_string(width) + " grid");
  }
  auto cat = concat<T>({to_grid(q, height, width), to_grid(k, height, width)}, 0);
  return to_tokens(din(p.proj_in(cat), p.din));
}

}  // namespace lpat
