#pragma once

// Prediction head: two classification branches (two-class foreground map
// and a centre-proximity map) and one (l, t, r, b) regression branch over the
// decoder tokens, plus label assignment, the weighted loss and box decoding.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "lpat/detail_correction.hpp"
#include "lpat/error.hpp"
#include "lpat/ops.hpp"
#include "lpat/params.hpp"
#include "lpat/tensor.hpp"

namespace lpat {

struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 <= x2 && y1 <= y2; }

  BoundingBox translated(double dx, double dy) const { return {x1 + dx, y1 + dy, x2 + dx, y2 + dy}; }

  BoundingBox clipped(double w, double h) const {
    BoundingBox b{std::clamp(x1, 0.0, w), std::clamp(y1, 0.0, h), std::clamp(x2, 0.0, w), std::clamp(y2, 0.0, h)};
    return b;
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Intersection over union; 0 for disjoint boxes and when both are empty.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Placement of the response grid in search-crop pixel coordinates: cell
/// (r, c) is centred at (offset + stride·c, offset + stride·r).
struct GridGeometry {
  std::size_t rows = 0, cols = 0;
  double stride = 1.0;
  double offset = 0.0;

  std::size_t cells() const { return rows * cols; }
  double center_x(std::size_t idx) const { return offset + stride * static_cast<double>(idx % cols); }
  double center_y(std::size_t idx) const { return offset + stride * static_cast<double>(idx / cols); }
};

template <typename T>
struct HeadParams {
  ConvLayer<T> trunk;
  ConvLayer<T> cls1_hidden, cls1_out, cls2_hidden, cls2_out, reg_hidden, reg_out;

  static void declare(ParamInit<T>& init, std::size_t channels) {
    init.conv("head.trunk", channels, channels, 3, 3);
    for (auto [name, out] : {std::pair{"cls1", 2u}, std::pair{"cls2", 1u}, std::pair{"reg", 4u}}) {
      init.conv(std::string("head.") + name + ".conv1", channels, channels, 3, 3);
      init.conv(std::string("head.") + name + ".conv2", out, channels, 3, 3);
    }
  }

  static HeadParams bind(ParamBinder<T>& b) {
    return {ConvLayer<T>::bind(b, "head.trunk"),        ConvLayer<T>::bind(b, "head.cls1.conv1"),
            ConvLayer<T>::bind(b, "head.cls1.conv2"),   ConvLayer<T>::bind(b, "head.cls2.conv1"),
            ConvLayer<T>::bind(b, "head.cls2.conv2"),   ConvLayer<T>::bind(b, "head.reg.conv1"),
            ConvLayer<T>::bind(b, "head.reg.conv2")};
  }
};

template <typename T>
struct HeadOutput {
  Tensor<T> cls1;  ///< 2×H×W logits (background, foreground)
  Tensor<T> cls2;  ///< 1×H×W logit of centre proximity
  Tensor<T> reg;   ///< 4×H×W positive (l, t, r, b) distances in stride units
};

template <typename T>
HeadOutput<T> head_forward(const Tensor<T>& tokens, const HeadParams<T>& p, std::size_t height, std::size_t width) {
  if (tokens.rank() != 2 || tokens.dim(0) != height * width || tokens.dim(1) != p.trunk.w.dim(1)) {
    throw ContractError("head_forward: tokens " + shape_str(tokens.shape()) + " do not form a " +
                        std::to_string(p.trunk.w.dim(1)) + "x" + std::to_string(height) + "x" + std::to_string(width) +
                        " map");
  }
  auto x = relu(p.trunk(to_grid(tokens, height, width)));
  return {p.cls1_out(relu(p.cls1_hidden(x))), p.cls2_out(relu(p.cls2_hidden(x))),
          exp(p.reg_out(relu(p.reg_hidden(x))))};
}

/// Training targets for one search crop.
struct Targets {
  GridGeometry grid;
  std::vector<std::size_t> cls1;       ///< 1 where the cell centre lies inside the box
  std::vector<double> cls2;            ///< 1 within the centre radius
  std::vector<std::size_t> positives;  ///< cells with cls1 == 1, ascending
  std::vector<double> reg;             ///< positives × (l, t, r, b) in pixels
  bool no_positives = false;
};

inline Targets assign_labels(const BoundingBox& gt, const GridGeometry& grid, double center_radius) {
  Targets t;
  t.grid = grid;
  t.cls1.assign(grid.cells(), 0);
  t.cls2.assign(grid.cells(), 0.0);
  const double gcx = gt.cx(), gcy = gt.cy();
  for (std::size_t i = 0; i < grid.cells(); ++i) {
    const double x = grid.center_x(i), y = grid.center_y(i);
    if (x >= gt.x1 && x <= gt.x2 && y >= gt.y1 && y <= gt.y2) {
      t.cls1[i] = 1;
      t.positives.push_back(i);
      t.reg.insert(t.reg.end(), {x - gt.x1, y - gt.y1, gt.x2 - x, gt.y2 - y});
    }
    if (std::hypot(x - gcx, y - gcy) <= center_radius) t.cls2[i] = 1.0;
  }
  t.no_positives = t.positives.empty();
  return t;
}

struct LossWeights {
  double cls1 = 1.0, cls2 = 1.0, reg = 1.0;
};

template <typename T>
struct LossTerms {
  Tensor<T> total, cls1, cls2, reg;
  bool no_positives = false;
};

/// λ1·CE(cls1) + λ2·BCE(cls2) + λ3·mean(1 − IoU) over positive cells.
template <typename T>
LossTerms<T> loss_total(const HeadOutput<T>& out, const Targets& t, const LossWeights& w) {
  if (out.cls1.dim(1) * out.cls1.dim(2) != t.grid.cells()) {
    throw ContractError("loss_total: prediction grid does not match the targets");
  }
  LossTerms<T> terms;
  terms.cls1 = cross_entropy_rows(to_tokens(out.cls1), t.cls1);
  terms.cls2 = bce_with_logits(out.cls2, std::vector<T>(t.cls2.begin(), t.cls2.end()));
  terms.no_positives = t.no_positives;
  if (t.no_positives) {
    terms.reg = Tensor<T>::constant(Array<T>::scalar(T{0}));
  } else {
    auto pred = scale(gather_rows(to_tokens(out.reg), t.positives), static_cast<T>(t.grid.stride));
    Array<T> target(Shape{t.positives.size(), 4}, std::vector<T>(t.reg.begin(), t.reg.end()));
    terms.reg = iou_loss(pred, target);
  }
  terms.total = add(add(scale(terms.cls1, static_cast<T>(w.cls1)), scale(terms.cls2, static_cast<T>(w.cls2))),
                    scale(terms.reg, static_cast<T>(w.reg)));
  return terms;
}

struct Decoded {
  BoundingBox box;  ///< search-crop coordinates
  std::size_t cell = 0;
  double score = 0.0;
};

/// Fused score per cell: softmax(cls1)[foreground] · sigmoid(cls2).
template <typename T>
std::vector<double> fused_scores(const Array<T>& cls1, const Array<T>& cls2) {
  const std::size_t n = cls2.size();
  if (cls1.size() != 2 * n) throw DimensionError("fused_scores: cls1 must hold two channels per cls2 cell");
  std::vector<double> s(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double fg = 1.0 / (1.0 + std::exp(static_cast<double>(cls1[i]) - static_cast<double>(cls1[n + i])));
    const double center = 1.0 / (1.0 + std::exp(-static_cast<double>(cls2[i])));
    s[i] = fg * center;
  }
  return s;
}

/// Picks the cell with the highest score (lowest index on ties) and turns its
/// distances into a box.
template <typename T>
Decoded decode_box(const Array<T>& reg, const std::vector<double>& scores, const GridGeometry& grid) {
  if (scores.size() != grid.cells() || reg.size() != 4 * grid.cells()) {
    throw DimensionError("decode_box: score/regression maps do not match the grid");
  }
  Decoded d;
  d.cell = static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
  d.score = scores[d.cell];
  const std::size_t n = grid.cells();
  const double x = grid.center_x(d.cell), y = grid.center_y(d.cell), s = grid.stride;
  d.box = {x - s * static_cast<double>(reg[d.cell]), y - s * static_cast<double>(reg[n + d.cell]),
           x + s * static_cast<double>(reg[2 * n + d.cell]), y + s * static_cast<double>(reg[3 * n + d.cell])};
  return d;
}

template <typename T>
Decoded decode_box(const HeadOutput<T>& out, const GridGeometry& grid) {
  return decode_box(out.reg.value(), fused_scores(out.cls1.value(), out.cls2.value()), grid);
}

}  // namespace lpat
