#pragma once

// Synthetic single-object sequences with exact ground truth: a textured
// rectangle or ellipse moving over a textured background, optionally
// rotating, changing scale and corrupted by Gaussian pixel noise.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "lpat/error.hpp"
#include "lpat/head.hpp"
#include "lpat/tensor.hpp"

namespace lpat {

enum class Motion { static_object, linear, random_walk };
enum class ObjectShape { rectangle, ellipse, mixed };

struct SequenceConfig {
  std::size_t frame_size = 128;
  std::size_t frames = 16;
  double object_min = 16.0;
  double object_max = 24.0;
  Motion motion = Motion::random_walk;
  double velocity_x = 1.0;  ///< linear motion, pixels per frame
  double velocity_y = 0.5;
  double walk_sigma = 3.0;  ///< random walk step deviation, pixels
  double noise_sigma = 0.0;
  double rotation_rate = 0.0;  ///< radians per frame
  double scale_rate = 0.0;     ///< relative size change per frame
  ObjectShape shape = ObjectShape::mixed;

  /// Largest half-extent the object can reach over the sequence.
  double max_half_extent() const {
    const double growth = std::pow(1.0 + std::abs(scale_rate), static_cast<double>(frames));
    return 0.5 * std::numbers::sqrt2 * object_max * growth;
  }

  void validate() const {
    if (frame_size < 8) throw ConfigError("sequence frame_size must be at least 8");
    if (frames == 0) throw ConfigError("sequence must have at least one frame");
    if (!(object_min > 0) || object_min > object_max) throw ConfigError("sequence object size range is invalid");
    if (noise_sigma < 0 || walk_sigma < 0) throw ConfigError("sequence noise and walk sigma must be >= 0");
    if (scale_rate <= -1.0) throw ConfigError("sequence scale_rate must exceed -1");
    if (2.0 * max_half_extent() >= static_cast<double>(frame_size)) {
      throw ConfigError("sequence object (up to " + std::to_string(2.0 * max_half_extent()) +
                        " px) larger than frame (" + std::to_string(frame_size) + " px)");
    }
  }
};

template <typename T>
struct SyntheticSequence {
  std::vector<Array<T>> frames;  ///< 3×S×S, values roughly in [-0.5, 0.5]
  std::vector<BoundingBox> gt;
  SequenceConfig config;
  std::uint64_t seed = 0;
};

template <typename T>
SyntheticSequence<T> gen_sequence(const SequenceConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const double size = static_cast<double>(cfg.frame_size);

  // Background: base colour plus two oriented sinusoids per channel.
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::array<double, 3> bg_base{};
  std::array<std::array<Wave, 2>, 3> bg_waves{};
  for (std::size_t c = 0; c < 3; ++c) {
    bg_base[c] = uniform(0.3, 0.6);
    for (auto& w : bg_waves[c]) w = {uniform(-0.3, 0.3), uniform(-0.3, 0.3), uniform(0.0, 6.3), uniform(0.05, 0.15)};
  }
  // Object: contrasting colour and stripes along its own axis.
  std::array<double, 3> obj_color{};
  for (std::size_t c = 0; c < 3; ++c) obj_color[c] = bg_base[c] < 0.45 ? uniform(0.75, 0.95) : uniform(0.0, 0.15);
  const double stripe_freq = uniform(0.4, 0.9);
  const double stripe_amp = uniform(0.05, 0.12);
  const double width0 = uniform(cfg.object_min, cfg.object_max);
  const double height0 = uniform(cfg.object_min, cfg.object_max);
  const double angle0 = cfg.rotation_rate != 0.0 ? uniform(0.0, std::numbers::pi) : 0.0;
  const bool ellipse = cfg.shape == ObjectShape::ellipse || (cfg.shape == ObjectShape::mixed && unit(rng) < 0.5);

  const double margin = cfg.max_half_extent() + 1.0;
  double cx = 0, cy = 0;
  if (cfg.motion == Motion::linear) {
    const double span = static_cast<double>(cfg.frames - 1);
    const double lo_x = margin - std::min(0.0, cfg.velocity_x * span), hi_x = size - margin - std::max(0.0, cfg.velocity_x * span);
    const double lo_y = margin - std::min(0.0, cfg.velocity_y * span), hi_y = size - margin - std::max(0.0, cfg.velocity_y * span);
    if (lo_x > hi_x || lo_y > hi_y) throw ConfigError("linear motion leaves the frame for this sequence length");
    cx = uniform(lo_x, hi_x);
    cy = uniform(lo_y, hi_y);
  } else {
    cx = uniform(margin, size - margin);
    cy = uniform(margin, size - margin);
  }

  std::normal_distribution<double> step(0.0, cfg.walk_sigma);
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  SyntheticSequence<T> seq;
  seq.config = cfg;
  seq.seed = seed;
  const std::size_t s = cfg.frame_size;
  for (std::size_t f = 0; f < cfg.frames; ++f) {
    const double t = static_cast<double>(f);
    double px = cx, py = cy;
    if (cfg.motion == Motion::linear) {
      px = cx + cfg.velocity_x * t;
      py = cy + cfg.velocity_y * t;
    } else if (cfg.motion == Motion::random_walk && f > 0) {
      auto reflect = [&](double v) {
        const double lo = margin, hi = size - margin;
        if (v < lo) v = 2 * lo - v;
        if (v > hi) v = 2 * hi - v;
        return std::clamp(v, lo, hi);
      };
      cx = reflect(cx + step(rng));
      cy = reflect(cy + step(rng));
      px = cx;
      py = cy;
    }
    const double grow = std::pow(1.0 + cfg.scale_rate, t);
    const double hw = 0.5 * width0 * grow, hh = 0.5 * height0 * grow;
    const double angle = angle0 + cfg.rotation_rate * t;
    const double ca = std::cos(angle), sa = std::sin(angle);

    double ex = 0, ey = 0;
    if (ellipse) {
      ex = std::sqrt(hw * hw * ca * ca + hh * hh * sa * sa);
      ey = std::sqrt(hw * hw * sa * sa + hh * hh * ca * ca);
    } else {
      ex = std::abs(hw * ca) + std::abs(hh * sa);
      ey = std::abs(hw * sa) + std::abs(hh * ca);
    }
    seq.gt.push_back(BoundingBox{px - ex, py - ey, px + ex, py + ey}.clipped(size, size));

    Array<T> img(Shape{3, s, s});
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const double fx = static_cast<double>(x) + 0.5, fy = static_cast<double>(y) + 0.5;
        const double u = ca * (fx - px) + sa * (fy - py);
        const double v = -sa * (fx - px) + ca * (fy - py);
        const bool inside = ellipse ? (u * u) / (hw * hw) + (v * v) / (hh * hh) <= 1.0
                                    : std::abs(u) <= hw && std::abs(v) <= hh;
        for (std::size_t c = 0; c < 3; ++c) {
          double val;
          if (inside) {
            val = obj_color[c] + stripe_amp * std::sin(stripe_freq * u);
          } else {
            val = bg_base[c];
            for (const auto& w : bg_waves[c]) val += w.amp * std::sin(w.fx * fx + w.fy * fy + w.phase);
          }
          img.at(c, y, x) = static_cast<T>(val - 0.5);
        }
      }
    if (cfg.noise_sigma > 0)
      for (auto& v : img.data) v += static_cast<T>(noise(rng));
    seq.frames.push_back(std::move(img));
  }
  return seq;
}

template <typename T>
struct Crop {
  Array<T> image;
  long origin_x = 0, origin_y = 0;  ///< frame coordinates of the crop's top-left pixel
  bool padded = false;              ///< true when mirror padding was needed
};

/// Square crop centred (to the nearest pixel) on (cx, cy); pixels outside
/// the frame are mirrored back in.
template <typename T>
Crop<T> crop_patch(const Array<T>& frame, double cx, double cy, std::size_t size) {
  const long h = static_cast<long>(frame.dim(1)), w = static_cast<long>(frame.dim(2));
  Crop<T> crop;
  crop.origin_x = std::lround(cx - static_cast<double>(size) / 2.0);
  crop.origin_y = std::lround(cy - static_cast<double>(size) / 2.0);
  crop.image = Array<T>(Shape{frame.dim(0), size, size});
  auto mirror = [](long i, long n) {
    if (n == 1) return 0L;
    const long period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
  };
  const long s = static_cast<long>(size);
  for (long y = 0; y < s; ++y) {
    const long fy = crop.origin_y + y;
    const bool oy = fy < 0 || fy >= h;
    for (long x = 0; x < s; ++x) {
      const long fx = crop.origin_x + x;
      if (oy || fx < 0 || fx >= w) crop.padded = true;
      const long sy = mirror(fy, h), sx = mirror(fx, w);
      for (std::size_t c = 0; c < frame.dim(0); ++c)
        crop.image.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
            frame.at(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
    }
  }
  return crop;
}

struct PairConfig {
  std::size_t template_size = 32;
  std::size_t search_size = 64;
  double jitter = 0.0;  ///< max |offset| of the search centre, pixels
  GridGeometry grid;
  double center_radius = 6.0;
};

template <typename T>
struct TrainingPair {
  Array<T> templ, search;
  long search_origin_x = 0, search_origin_y = 0;
  BoundingBox gt_in_search;
  Targets targets;
  bool padded = false;
};

/// Template around gt[i]; search crop around gt[i] (plus jitter); labels
/// from gt[j] mapped into the search crop.
template <typename T>
TrainingPair<T> make_pair(const SyntheticSequence<T>& seq, std::size_t i, std::size_t j, const PairConfig& cfg,
                          std::mt19937_64& rng) {
  if (i >= seq.frames.size() || j >= seq.frames.size()) throw ContractError("make_pair: frame index out of range");
  const auto& anchor = seq.gt[i];
  double dx = 0, dy = 0;
  if (cfg.jitter > 0) {
    std::uniform_real_distribution<double> jit(-cfg.jitter, cfg.jitter);
    dx = jit(rng);
    dy = jit(rng);
  }
  auto z = crop_patch(seq.frames[i], anchor.cx(), anchor.cy(), cfg.template_size);
  auto x = crop_patch(seq.frames[j], anchor.cx() + dx, anchor.cy() + dy, cfg.search_size);
  TrainingPair<T> pair;
  pair.templ = std::move(z.image);
  pair.search = std::move(x.image);
  pair.search_origin_x = x.origin_x;
  pair.search_origin_y = x.origin_y;
  pair.gt_in_search = seq.gt[j].translated(-static_cast<double>(x.origin_x), -static_cast<double>(x.origin_y));
  pair.targets = assign_labels(pair.gt_in_search, cfg.grid, cfg.center_radius);
  pair.padded = z.padded || x.padded;
  return pair;
}

}  // namespace lpat
