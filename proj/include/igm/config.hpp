#pragma once

// Run configuration: TOML on disk, JSON inside checkpoints. Unknown keys are rejected.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <set>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "igm/diffusion.hpp"
#include "igm/error.hpp"
#include "igm/losses.hpp"
#include "igm/net.hpp"
#include "igm/skeleton.hpp"

namespace igm {

struct DataConfig {
  std::string train;  // IGMD files; relative paths resolve against the config file's directory
  std::string val;
  int frames = 0;     // temporal downsampling target; 0 keeps the stored length
};

// The usual 1e-4..0.02 betas assume 1000 steps; scaled by 1000 / steps they bring
// alpha_bar at the last of 50 steps close to zero, so sampling can start from pure noise.
struct ScheduleConfig {
  int steps = 50;
  double beta_min = 0.002;
  double beta_max = 0.4;
  std::string kind = "linear";
  double clip = 5.0;  // sampling clamps x_0 estimates to [-clip, clip] model units; 0 disables
};

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.0;
  int steps = 2000;
  int batch = 32;
  int checkpoint_every = 500;
};

struct EvalConfig {
  int knn_k = 1;
  int probe_epochs = 200;
  double probe_lr = 0.1;
};

struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 0;  // 0 = all hardware threads
  DataConfig data;
  NetConfig net;
  AdapterConfig adapter;
  ScheduleConfig schedule;
  LossWeights loss;
  OptimConfig optim;
  AugmentationSpec augment;
  EvalConfig eval;

  void validate() const {
    net.validate();
    adapter.validate();
    loss.validate();
    augment.validate();
    make_schedule(schedule.steps, schedule.beta_min, schedule.beta_max, schedule.kind);
    if (schedule.clip < 0) throw ConfigError("schedule.clip must be >= 0");
    if (optim.lr <= 0) throw ConfigError("optim.lr must be > 0");
    if (optim.steps < 0) throw ConfigError("optim.steps must be >= 0");
    if (optim.batch < 1) throw ConfigError("optim.batch must be >= 1");
    if (optim.checkpoint_every < 1) throw ConfigError("optim.checkpoint_every must be >= 1");
    if (optim.beta1 < 0 || optim.beta1 >= 1 || optim.beta2 < 0 || optim.beta2 >= 1)
      throw ConfigError("Adam betas must lie in [0, 1)");
    if (optim.weight_decay < 0) throw ConfigError("optim.weight_decay must be >= 0");
    if (data.frames < 0) throw ConfigError("data.frames must be >= 0");
    if (threads < 0) throw ConfigError("threads must be >= 0");
    if (eval.knn_k < 1) throw ConfigError("eval.knn_k must be >= 1");
    if (eval.probe_epochs < 1 || eval.probe_lr <= 0) throw ConfigError("probe epochs and lr must be positive");
  }

  int worker_threads() const {
    int n = threads > 0 ? threads : int(std::max(1u, std::thread::hardware_concurrency()));
    if (const char* cap = std::getenv("IGM_THREADS")) {
      const int c = std::atoi(cap);
      if (c < 1) throw ConfigError(std::string("IGM_THREADS must be a positive integer, got '") + cap + "'");
      n = std::min(n, c);
    }
    return n;
  }
};

inline std::string to_string(ProfileMode m) { return m == ProfileMode::batch ? "batch" : "token"; }
inline ProfileMode profile_mode_from_string(const std::string& s) {
  if (s == "batch") return ProfileMode::batch;
  if (s == "token") return ProfileMode::token;
  throw ConfigError("unknown profile mode '" + s + "' (expected batch or token)");
}

/// IGM_SEED replaces the configured seed.
inline void apply_env_overrides(RunConfig& c) {
  if (const char* s = std::getenv("IGM_SEED")) {
    char* end = nullptr;
    const auto v = std::strtoull(s, &end, 10);
    if (end == s || *end != '\0') throw ConfigError(std::string("IGM_SEED must be an integer, got '") + s + "'");
    c.seed = v;
  }
}

// ---------------------------------------------------------------------------
// JSON.

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& a = c.augment;
  return {
      {"seed", c.seed},
      {"threads", c.threads},
      {"data", {{"train", c.data.train}, {"val", c.data.val}, {"frames", c.data.frames}}},
      {"model",
       {{"dim", c.net.dim},
        {"layers", c.net.layers},
        {"heads", c.net.heads},
        {"ffn_mult", c.net.ffn_mult},
        {"layout", to_string(c.net.layout)}}},
      {"adapter", {{"eta", c.adapter.eta}, {"temperature", c.adapter.temperature}}},
      {"schedule",
       {{"steps", c.schedule.steps},
        {"beta_min", c.schedule.beta_min},
        {"beta_max", c.schedule.beta_max},
        {"kind", c.schedule.kind},
        {"clip", c.schedule.clip}}},
      {"loss",
       {{"gen", c.loss.gen},
        {"feat", c.loss.feat},
        {"dist", c.loss.dist},
        {"tau", c.loss.tau},
        {"profile", to_string(c.loss.profile)}}},
      {"optim",
       {{"lr", c.optim.lr},
        {"beta1", c.optim.beta1},
        {"beta2", c.optim.beta2},
        {"weight_decay", c.optim.weight_decay},
        {"steps", c.optim.steps},
        {"batch", c.optim.batch},
        {"checkpoint_every", c.optim.checkpoint_every}}},
      {"augment",
       {{"rotate", a.enable_rotate ? a.rotate_max_rad : 0.0},
        {"shear", a.enable_shear ? a.shear_max : 0.0},
        {"crop_min", a.crop_ratio_range.first},
        {"crop_max", a.crop_ratio_range.second},
        {"crop", a.enable_crop},
        {"mask", a.enable_mask ? a.mask_joint_prob : 0.0},
        {"flip", a.enable_flip ? a.flip_prob : 0.0}}},
      {"eval", {{"knn_k", c.eval.knn_k}, {"probe_epochs", c.eval.probe_epochs}, {"probe_lr", c.eval.probe_lr}}},
  };
}

namespace detail {

/// Shared reader for TOML tables and JSON objects: typed lookups plus a check that every
/// key present was consumed.
template <typename Node>
class Section {
 public:
  Section(const Node* node, std::string path) : node_(node), path_(std::move(path)) {}

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!node_) return;
    if (auto v = lookup<T>(key)) out = *v;
  }

  void mark(const std::string& key) { seen_.insert(key); }

  void finish() const {
    if (!node_) return;
    for (const auto& k : keys())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + qualified(k) + "'");
  }

  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  template <typename T>
  std::optional<T> lookup(const std::string& key) const;
  std::vector<std::string> keys() const;

  const Node* node_;
  std::string path_;
  std::set<std::string> seen_;
};

template <>
template <typename T>
std::optional<T> Section<toml::table>::lookup(const std::string& key) const {
  const toml::node* n = node_->get(key);
  if (!n) return std::nullopt;
  if constexpr (std::is_same_v<T, bool>) {
    if (auto v = n->value<bool>()) return *v;
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (auto v = n->value<std::string>()) return *v;
  } else if constexpr (std::is_floating_point_v<T>) {
    if (n->is_number()) return T(*n->value<double>());
  } else {
    if (n->is_integer()) {
      const auto v = *n->value<std::int64_t>();
      if (v < 0 && std::is_unsigned_v<T>) throw ConfigError("config key '" + qualified(key) + "' must be >= 0");
      return T(v);
    }
  }
  throw ConfigError("config key '" + qualified(key) + "' has the wrong type");
}

template <>
inline std::vector<std::string> Section<toml::table>::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : *node_) out.emplace_back(k.str());
  return out;
}

template <>
template <typename T>
std::optional<T> Section<nlohmann::json>::lookup(const std::string& key) const {
  auto it = node_->find(key);
  if (it == node_->end()) return std::nullopt;
  try {
    return it->template get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + qualified(key) + "' has the wrong type");
  }
}

template <>
inline std::vector<std::string> Section<nlohmann::json>::keys() const {
  std::vector<std::string> out;
  for (auto it = node_->begin(); it != node_->end(); ++it) out.push_back(it.key());
  return out;
}

template <typename Node>
const Node* child(const Node& root, const std::string& key);

template <>
inline const toml::table* child(const toml::table& root, const std::string& key) {
  const toml::node* n = root.get(key);
  if (!n) return nullptr;
  if (!n->is_table()) throw ConfigError("config key '" + key + "' must be a table");
  return n->as_table();
}

template <>
inline const nlohmann::json* child(const nlohmann::json& root, const std::string& key) {
  auto it = root.find(key);
  if (it == root.end()) return nullptr;
  if (!it->is_object()) throw ConfigError("config key '" + key + "' must be a table");
  return &*it;
}

template <typename Node>
RunConfig parse_config(const Node& root) {
  RunConfig c;
  Section<Node> top(&root, "");
  top.get("seed", c.seed);
  top.get("threads", c.threads);

  Section<Node> data(child(root, "data"), "data");
  data.get("train", c.data.train);
  data.get("val", c.data.val);
  data.get("frames", c.data.frames);
  data.finish();

  Section<Node> model(child(root, "model"), "model");
  std::string layout = to_string(c.net.layout);
  model.get("dim", c.net.dim);
  model.get("layers", c.net.layers);
  model.get("heads", c.net.heads);
  model.get("ffn_mult", c.net.ffn_mult);
  model.get("layout", layout);
  c.net.layout = token_layout_from_string(layout);
  model.finish();

  Section<Node> adapter(child(root, "adapter"), "adapter");
  adapter.get("eta", c.adapter.eta);
  adapter.get("temperature", c.adapter.temperature);
  adapter.finish();

  Section<Node> sched(child(root, "schedule"), "schedule");
  sched.get("steps", c.schedule.steps);
  sched.get("beta_min", c.schedule.beta_min);
  sched.get("beta_max", c.schedule.beta_max);
  sched.get("kind", c.schedule.kind);
  sched.get("clip", c.schedule.clip);
  sched.finish();

  Section<Node> loss(child(root, "loss"), "loss");
  std::string profile = to_string(c.loss.profile);
  loss.get("gen", c.loss.gen);
  loss.get("feat", c.loss.feat);
  loss.get("dist", c.loss.dist);
  loss.get("tau", c.loss.tau);
  loss.get("profile", profile);
  c.loss.profile = profile_mode_from_string(profile);
  loss.finish();

  Section<Node> optim(child(root, "optim"), "optim");
  optim.get("lr", c.optim.lr);
  optim.get("beta1", c.optim.beta1);
  optim.get("beta2", c.optim.beta2);
  optim.get("weight_decay", c.optim.weight_decay);
  optim.get("steps", c.optim.steps);
  optim.get("batch", c.optim.batch);
  optim.get("checkpoint_every", c.optim.checkpoint_every);
  optim.finish();

  Section<Node> aug(child(root, "augment"), "augment");
  auto& a = c.augment;
  aug.get("rotate", a.rotate_max_rad);
  aug.get("shear", a.shear_max);
  aug.get("crop_min", a.crop_ratio_range.first);
  aug.get("crop_max", a.crop_ratio_range.second);
  aug.get("crop", a.enable_crop);
  aug.get("mask", a.mask_joint_prob);
  aug.get("flip", a.flip_prob);
  aug.finish();
  a.enable_rotate = a.rotate_max_rad > 0;
  a.enable_shear = a.shear_max > 0;
  a.enable_mask = a.mask_joint_prob > 0;
  a.enable_flip = a.flip_prob > 0;

  Section<Node> ev(child(root, "eval"), "eval");
  ev.get("knn_k", c.eval.knn_k);
  ev.get("probe_epochs", c.eval.probe_epochs);
  ev.get("probe_lr", c.eval.probe_lr);
  ev.finish();

  for (const char* t : {"data", "model", "adapter", "schedule", "loss", "optim", "augment", "eval"}) top.mark(t);
  top.finish();
  c.validate();
  return c;
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) { return detail::parse_config(j); }

inline RunConfig parse_config_toml(const std::string& text, const std::string& source = "config") {
  toml::table tbl;
  try {
    tbl = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    throw ConfigError("cannot parse " + source + ": " + std::string(e.description()) + " at line " +
                      std::to_string(e.source().begin.line));
  }
  return detail::parse_config(tbl);
}

/// Loads a TOML config, resolves data paths against its directory and checks they exist.
inline RunConfig load_config(const std::string& path) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
  std::ifstream f(path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  RunConfig c = parse_config_toml(text, path);
  const fs::path base = fs::path(path).parent_path();
  for (std::string* p : {&c.data.train, &c.data.val}) {
    if (p->empty()) continue;
    if (fs::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  }
  if (c.data.train.empty()) throw ConfigError("data.train is required");
  for (const std::string* p : {&c.data.train, &c.data.val})
    if (!p->empty() && !fs::exists(*p)) throw ConfigError("dataset not found: " + *p);
  apply_env_overrides(c);
  return c;
}

inline ModelConfig model_config(const RunConfig& c, int frames, int joints, int channels) {
  ModelConfig m;
  m.net = c.net;
  m.adapter = c.adapter;
  m.frames = frames;
  m.joints = joints;
  m.channels = channels;
  m.diffusion_steps = c.schedule.steps;
  m.validate();
  return m;
}

inline NoiseSchedule make_schedule(const ScheduleConfig& s) {
  return make_schedule(s.steps, s.beta_min, s.beta_max, s.kind);
}

}  // namespace igm
