#pragma once

// JSON run configuration. Every section and key is optional; omitted keys
// keep the defaults below. Unknown keys are rejected with their full path.
//
// {
//   "tensor":      { "precision": "f32" | "f64", "threads": 1 },
//   "attention":   { "k": 3 | [k_enc1, k_enc2], "heads": 2, "channels": 16 },
//   "transformer": { "ffn_channels": 32, "generator_channels": 8, "norm_eps": 1e-5 },
//   "backbone":    { "preset": "toy" | "paper", "channels": [8,16,16,16,16],
//                    "kernels": [4,3,2,3,3], "strides": [2,2,1,1,1], "pads": [0,0,0,1,1] },
//   "input":       { "template_size": 32, "search_size": 64 },
//   "head":        { "lambda1": 1, "lambda2": 1, "lambda3": 1, "center_radius": 6 },
//   "harness":     { "steps": 300, "batch": 4, "learning_rate": 0.01, "momentum": 0.9,
//                    "jitter": 12, "max_frame_gap": 3, "seed": 7, "init_seed": 1,
//                    "train_sequence": {...}, "track_sequence": {...} },
//   "flags":       { "paper_literal_residual": false }
// }
//
// Sequence sections accept: frame_size, frames, object_min, object_max,
// motion ("static" | "linear" | "random_walk"), velocity_x, velocity_y,
// walk_sigma, noise_sigma, rotation_rate, scale_rate,
// shape ("rectangle" | "ellipse" | "mixed").

#include <cstdlib>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lpat/error.hpp"
#include "lpat/model.hpp"
#include "lpat/synthetic.hpp"
#include "lpat/train.hpp"

namespace lpat {

enum class Precision { f32, f64 };

struct RunConfig {
  Precision precision = Precision::f32;
  std::size_t threads = 1;
  ModelConfig model;
  TrainConfig train;
  SequenceConfig track_sequence{.frame_size = 128, .frames = 16, .motion = Motion::static_object};

  void validate() const {
    if (threads == 0) throw ConfigError("tensor.threads must be >= 1");
    model.validate();
    train.validate();
    track_sequence.validate();
  }
};

namespace detail {

using json = nlohmann::json;

/// Reads one JSON object, remembering which keys were consumed.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label() + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void read(const std::string& key, std::size_t& out) {
    if (!has(key)) return;
    const auto& v = raw(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(key_path(key) + ": expected a non-negative integer");
    out = v.get<std::size_t>();
  }

  void read(const std::string& key, std::uint64_t& out, int) {
    if (!has(key)) return;
    const auto& v = raw(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
      throw ConfigError(key_path(key) + ": expected a non-negative integer");
    out = v.get<std::uint64_t>();
  }

  void read(const std::string& key, double& out) {
    if (!has(key)) return;
    const auto& v = raw(key);
    if (!v.is_number()) throw ConfigError(key_path(key) + ": expected a number");
    out = v.get<double>();
  }

  void read(const std::string& key, bool& out) {
    if (!has(key)) return;
    const auto& v = raw(key);
    if (!v.is_boolean()) throw ConfigError(key_path(key) + ": expected true or false");
    out = v.get<bool>();
  }

  std::string read_enum(const std::string& key, const std::vector<std::string>& allowed, const std::string& fallback) {
    if (!has(key)) return fallback;
    const auto& v = raw(key);
    if (v.is_string()) {
      for (const auto& a : allowed)
        if (v.get<std::string>() == a) return a;
    }
    std::string list;
    for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
    throw ConfigError(key_path(key) + ": expected one of " + list);
  }

  std::vector<std::size_t> read_list(const std::string& key, std::size_t length) {
    const auto& v = raw(key);
    if (!v.is_array() || v.size() != length) {
      throw ConfigError(key_path(key) + ": expected an array of " + std::to_string(length) + " integers");
    }
    std::vector<std::size_t> out;
    for (const auto& e : v) {
      if (!e.is_number_integer() || e.get<long long>() < 0) throw ConfigError(key_path(key) + ": expected non-negative integers");
      out.push_back(e.get<std::size_t>());
    }
    return out;
  }

  Section child(const std::string& key) {
    return Section(raw(key), key_path(key));
  }

  /// Throws on the first key that was never read.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) throw ConfigError("unknown config key '" + key_path(it.key()) + "'");
    }
  }

 private:
  std::string label() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline void read_sequence(Section s, SequenceConfig& c) {
  s.read("frame_size", c.frame_size);
  s.read("frames", c.frames);
  s.read("object_min", c.object_min);
  s.read("object_max", c.object_max);
  const std::string motion = s.read_enum("motion", {"static", "linear", "random_walk"},
                                         c.motion == Motion::static_object ? "static"
                                         : c.motion == Motion::linear      ? "linear"
                                                                           : "random_walk");
  c.motion = motion == "static" ? Motion::static_object : motion == "linear" ? Motion::linear : Motion::random_walk;
  s.read("velocity_x", c.velocity_x);
  s.read("velocity_y", c.velocity_y);
  s.read("walk_sigma", c.walk_sigma);
  s.read("noise_sigma", c.noise_sigma);
  s.read("rotation_rate", c.rotation_rate);
  s.read("scale_rate", c.scale_rate);
  const std::string shape = s.read_enum("shape", {"rectangle", "ellipse", "mixed"},
                                        c.shape == ObjectShape::rectangle ? "rectangle"
                                        : c.shape == ObjectShape::ellipse ? "ellipse"
                                                                          : "mixed");
  c.shape = shape == "rectangle" ? ObjectShape::rectangle : shape == "ellipse" ? ObjectShape::ellipse : ObjectShape::mixed;
  s.finish();
}

}  // namespace detail

/// Builds a RunConfig from defaults plus the given document; validates it.
inline RunConfig parse_config(const nlohmann::json& doc) {
  using detail::Section;
  RunConfig cfg;
  Section root(doc, "");

  if (root.has("tensor")) {
    auto s = root.child("tensor");
    cfg.precision = s.read_enum("precision", {"f32", "f64"}, "f32") == "f64" ? Precision::f64 : Precision::f32;
    s.read("threads", cfg.threads);
    s.finish();
  }

  auto& model = cfg.model;
  auto& dims = model.transformer;
  if (root.has("backbone")) {
    auto s = root.child("backbone");
    if (s.read_enum("preset", {"toy", "paper"}, "toy") == "paper") {
      model = ModelConfig::paper_scale();
    }
    std::vector<std::size_t> channels, kernels, strides, pads;
    if (s.has("channels")) channels = s.read_list("channels", 5);
    if (s.has("kernels")) kernels = s.read_list("kernels", 5);
    if (s.has("strides")) strides = s.read_list("strides", 5);
    if (s.has("pads")) pads = s.read_list("pads", 5);
    for (std::size_t i = 0; i < 5; ++i) {
      auto& l = model.backbone.layers[i];
      if (!channels.empty()) l.out_channels = channels[i];
      if (!kernels.empty()) l.kernel = kernels[i];
      if (!strides.empty()) l.stride = strides[i];
      if (!pads.empty()) l.pad = pads[i];
    }
    s.finish();
  }
  if (root.has("input")) {
    auto s = root.child("input");
    s.read("template_size", model.template_size);
    s.read("search_size", model.search_size);
    s.finish();
  }
  if (root.has("attention")) {
    auto s = root.child("attention");
    if (s.has("k")) {
      const auto& k = s.raw("k");
      if (k.is_array()) {
        auto ks = s.read_list("k", 2);
        dims.window_enc1 = ks[0];
        dims.window_enc2 = ks[1];
      } else {
        std::size_t v = 0;
        if (!k.is_number_integer() || k.get<long long>() < 0) throw ConfigError("attention.k: expected an odd integer or a pair");
        v = k.get<std::size_t>();
        dims.window_enc1 = dims.window_enc2 = v;
      }
    }
    s.read("heads", dims.heads);
    s.read("channels", dims.channels);
    s.finish();
  }
  if (root.has("transformer")) {
    auto s = root.child("transformer");
    s.read("ffn_channels", dims.ffn_channels);
    s.read("generator_channels", dims.generator_channels);
    s.read("norm_eps", dims.norm_eps);
    s.finish();
  }
  if (root.has("head")) {
    auto s = root.child("head");
    s.read("lambda1", model.loss.cls1);
    s.read("lambda2", model.loss.cls2);
    s.read("lambda3", model.loss.reg);
    if (s.has("center_radius")) {
      double r = 0;
      s.read("center_radius", r);
      model.center_radius = r;
    }
    s.finish();
  }
  if (root.has("harness")) {
    auto s = root.child("harness");
    auto& t = cfg.train;
    s.read("steps", t.steps);
    s.read("batch", t.batch);
    s.read("learning_rate", t.learning_rate);
    s.read("momentum", t.momentum);
    s.read("jitter", t.jitter);
    s.read("max_frame_gap", t.max_frame_gap);
    s.read("seed", t.seed, 0);
    s.read("init_seed", t.init_seed, 0);
    if (s.has("train_sequence")) detail::read_sequence(s.child("train_sequence"), t.sequence);
    if (s.has("track_sequence")) detail::read_sequence(s.child("track_sequence"), cfg.track_sequence);
    s.finish();
  }
  if (root.has("flags")) {
    auto s = root.child("flags");
    s.read("paper_literal_residual", dims.paper_literal_residual);
    s.finish();
  }
  root.finish();

  if (const char* env = std::getenv("LPAT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("LPAT_THREADS must be a positive integer");
    cfg.threads = static_cast<std::size_t>(v);
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return parse_config(doc);
}

/// Effective configuration as a JSON document accepted by parse_config.
inline nlohmann::json to_json(const RunConfig& cfg) {
  using nlohmann::json;
  auto seq = [](const SequenceConfig& s) {
    return json{{"frame_size", s.frame_size},
                {"frames", s.frames},
                {"object_min", s.object_min},
                {"object_max", s.object_max},
                {"motion", s.motion == Motion::static_object ? "static" : s.motion == Motion::linear ? "linear" : "random_walk"},
                {"velocity_x", s.velocity_x},
                {"velocity_y", s.velocity_y},
                {"walk_sigma", s.walk_sigma},
                {"noise_sigma", s.noise_sigma},
                {"rotation_rate", s.rotation_rate},
                {"scale_rate", s.scale_rate},
                {"shape", s.shape == ObjectShape::rectangle ? "rectangle" : s.shape == ObjectShape::ellipse ? "ellipse" : "mixed"}};
  };
  const auto& m = cfg.model;
  const auto& d = m.transformer;
  json backbone{{"channels", json::array()}, {"kernels", json::array()}, {"strides", json::array()}, {"pads", json::array()}};
  for (const auto& l : m.backbone.layers) {
    backbone["channels"].push_back(l.out_channels);
    backbone["kernels"].push_back(l.kernel);
    backbone["strides"].push_back(l.stride);
    backbone["pads"].push_back(l.pad);
  }
  const auto& t = cfg.train;
  return json{
      {"tensor", {{"precision", cfg.precision == Precision::f64 ? "f64" : "f32"}, {"threads", cfg.threads}}},
      {"attention", {{"k", json::array({d.window_enc1, d.window_enc2})}, {"heads", d.heads}, {"channels", d.channels}}},
      {"transformer", {{"ffn_channels", d.ffn_channels}, {"generator_channels", d.generator_channels}, {"norm_eps", d.norm_eps}}},
      {"backbone", backbone},
      {"input", {{"template_size", m.template_size}, {"search_size", m.search_size}}},
      {"head", {{"lambda1", m.loss.cls1}, {"lambda2", m.loss.cls2}, {"lambda3", m.loss.reg}, {"center_radius", m.radius()}}},
      {"harness",
       {{"steps", t.steps},
        {"batch", t.batch},
        {"learning_rate", t.learning_rate},
        {"momentum", t.momentum},
        {"jitter", t.jitter},
        {"max_frame_gap", t.max_frame_gap},
        {"seed", t.seed},
        {"init_seed", t.init_seed},
        {"train_sequence", seq(t.sequence)},
        {"track_sequence", seq(cfg.track_sequence)}}},
      {"flags", {{"paper_literal_residual", d.paper_literal_residual}}}};
}

}  // namespace lpat
