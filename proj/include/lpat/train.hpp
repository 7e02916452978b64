#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lpat/error.hpp"
#include "lpat/model.hpp"
#include "lpat/params.hpp"
#include "lpat/synthetic.hpp"
#include "lpat/tensor.hpp"

namespace lpat {

struct TrainConfig {
  std::size_t steps = 300;
  std::size_t batch = 4;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double jitter = 12.0;
  std::size_t max_frame_gap = 3;
  std::uint64_t seed = 7;       ///< data stream
  std::uint64_t init_seed = 1;  ///< parameter initialization
  SequenceConfig sequence{.frame_size = 128, .frames = 4, .motion = Motion::random_walk};

  void validate() const {
    if (batch == 0) throw ConfigError("harness.batch must be >= 1");
    if (learning_rate < 0) throw ConfigError("harness.learning_rate must be >= 0");
    if (momentum < 0 || momentum >= 1) throw ConfigError("harness.momentum must be in [0, 1)");
    if (jitter < 0) throw ConfigError("harness.jitter must be >= 0");
    sequence.validate();
  }
};

struct TrainRecord {
  std::size_t step = 0;
  double total = 0, cls1 = 0, cls2 = 0, reg = 0;
  double seconds = 0;  ///< wall-clock since the start of training
};

inline void write_trace_csv(std::ostream& os, const std::vector<TrainRecord>& records) {
  os << "step,total,cls1,cls2,reg\n";
  os.precision(17);
  for (const auto& r : records) os << r.step << ',' << r.total << ',' << r.cls1 << ',' << r.cls2 << ',' << r.reg << '\n';
}

/// SGD with momentum: v ← μ·v + g, θ ← θ − lr·v.
template <typename T>
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  void step(ModelParams<T>& params, const std::map<std::string, Array<T>>& grads) {
    for (auto& [name, value] : params) {
      auto g = grads.find(name);
      if (g == grads.end()) continue;
      auto& v = velocity_[name];
      if (v.empty()) v.assign(value.size(), T{0});
      for (std::size_t i = 0; i < value.size(); ++i) {
        v[i] = static_cast<T>(momentum_) * v[i] + g->second[i];
        value[i] -= static_cast<T>(lr_) * v[i];
      }
    }
  }

 private:
  double lr_, momentum_;
  std::map<std::string, std::vector<T>> velocity_;
};

template <typename T>
struct TrainResult {
  std::vector<TrainRecord> records;
  ModelParams<T> params;
};

/// Draws the batch of pairs used at one step. Sequence seeds and frame
/// choices derive from (seed, step) only.
template <typename T>
std::vector<TrainingPair<T>> training_batch(const ModelConfig& model, const TrainConfig& cfg, std::size_t step) {
  std::seed_seq seq_seed{cfg.seed, static_cast<std::uint64_t>(step), std::uint64_t{0x4c504154}};
  std::mt19937_64 rng(seq_seed);
  PairConfig pc{model.template_size, model.search_size, cfg.jitter, model.grid(), model.radius()};
  std::vector<TrainingPair<T>> out;
  for (std::size_t b = 0; b < cfg.batch; ++b) {
    auto seq = gen_sequence<T>(cfg.sequence, rng());
    const std::size_t frames = seq.frames.size();
    std::uniform_int_distribution<std::size_t> pick_i(0, frames - 1);
    const std::size_t i = pick_i(rng);
    const std::size_t hi = std::min(frames - 1, i + cfg.max_frame_gap);
    std::uniform_int_distribution<std::size_t> pick_j(i, hi);
    const std::size_t j = pick_j(rng);
    out.push_back(make_pair(seq, i, j, pc, rng));
  }
  return out;
}

struct StepLoss {
  double total = 0, cls1 = 0, cls2 = 0, reg = 0;
};

/// Batch-mean loss and gradients at the current parameters.
template <typename T>
StepLoss loss_and_grads(const ModelParams<T>& params, const ModelConfig& model,
                        const std::vector<TrainingPair<T>>& batch, std::map<std::string, Array<T>>* grads) {
  StepLoss acc;
  if (grads) grads->clear();
  const T inv = T{1} / static_cast<T>(batch.size());
  for (const auto& pair : batch) {
    ParamBinder<T> binder(params, grads != nullptr);
    auto view = ModelView<T>::bind(binder, model);
    auto fwd = model_forward(view, model, Tensor<T>::constant(pair.templ), Tensor<T>::constant(pair.search));
    auto terms = loss_total(fwd.head, pair.targets, model.loss);
    acc.total += static_cast<double>(terms.total.item()) / static_cast<double>(batch.size());
    acc.cls1 += static_cast<double>(terms.cls1.item()) / static_cast<double>(batch.size());
    acc.cls2 += static_cast<double>(terms.cls2.item()) / static_cast<double>(batch.size());
    acc.reg += static_cast<double>(terms.reg.item()) / static_cast<double>(batch.size());
    if (!grads) continue;
    backward(terms.total);
    for (const auto& [name, leaf] : binder.bound()) {
      auto g = leaf.grad();
      auto& slot = (*grads)[name];
      if (slot.data.empty()) slot = Array<T>(g.shape);
      for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i] * inv;
    }
  }
  return acc;
}

template <typename T>
TrainResult<T> train_toy(const ModelConfig& model, const TrainConfig& cfg, ModelParams<T> params,
                         const std::function<void(const TrainRecord&)>& on_step = {}) {
  model.validate();
  cfg.validate();
  SgdMomentum<T> opt(cfg.learning_rate, cfg.momentum);
  TrainResult<T> result;
  const auto start = std::chrono::steady_clock::now();
  std::map<std::string, Array<T>> grads;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    auto batch = training_batch<T>(model, cfg, step);
    const auto loss = loss_and_grads(params, model, batch, &grads);
    TrainRecord rec{step, loss.total, loss.cls1, loss.cls2, loss.reg,
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
    if (!std::isfinite(loss.total)) {
      std::ostringstream os;
      os << "non-finite loss at step " << step << " (cls1=" << loss.cls1 << ", cls2=" << loss.cls2
         << ", reg=" << loss.reg << ")";
      throw InstabilityError(os.str());
    }
    result.records.push_back(rec);
    if (on_step) on_step(rec);
    opt.step(params, grads);
  }
  result.params = std::move(params);
  return result;
}

template <typename T>
TrainResult<T> train_toy(const ModelConfig& model, const TrainConfig& cfg) {
  return train_toy(model, cfg, init_model<T>(model, cfg.init_seed));
}

struct TrackResult {
  std::vector<BoundingBox> boxes;  ///< frame 0 is the initialization box
  std::vector<double> ious;        ///< per frame, frame 0 included (= 1)
  double mean_iou = 0;             ///< over frames 1..N-1
};

/// Template fixed from frame 0's ground truth; every later frame is searched
/// around the previous prediction.
template <typename T>
TrackResult track_sequence(const ModelParams<T>& params, const ModelConfig& model, const SyntheticSequence<T>& seq) {
  if (seq.frames.size() < 2) throw ContractError("track_sequence needs at least two frames");
  model.validate();
  const auto grid = model.grid();
  ParamBinder<T> binder(params, false);
  auto view = ModelView<T>::bind(binder, model);
  const double frame_w = static_cast<double>(seq.frames[0].dim(2)), frame_h = static_cast<double>(seq.frames[0].dim(1));

  const auto& init = seq.gt[0];
  auto templ = Tensor<T>::constant(crop_patch(seq.frames[0], init.cx(), init.cy(), model.template_size).image);
  TrackResult out;
  out.boxes.push_back(init);
  out.ious.push_back(1.0);
  BoundingBox prev = init;
  double sum = 0;
  for (std::size_t f = 1; f < seq.frames.size(); ++f) {
    auto crop = crop_patch(seq.frames[f], prev.cx(), prev.cy(), model.search_size);
    auto fwd = model_forward(view, model, templ, Tensor<T>::constant(crop.image));
    auto decoded = decode_box(fwd.head, grid);
    auto box = decoded.box.translated(static_cast<double>(crop.origin_x), static_cast<double>(crop.origin_y))
                   .clipped(frame_w, frame_h);
    out.boxes.push_back(box);
    out.ious.push_back(iou(box, seq.gt[f]));
    sum += out.ious.back();
    prev = box;
  }
  out.mean_iou = sum / static_cast<double>(seq.frames.size() - 1);
  return out;
}

}  // namespace lpat
