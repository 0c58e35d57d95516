#pragma once

// Pretraining loop: data preparation, Adam, deterministic batching, checkpointing, metrics
// and resume.
//
// Output directory layout:
//   config.json          resolved run configuration
//   metrics.csv          step,gen,feat,dist,total,seed (one row per step)
//   timing.csv           step,wall_seconds (kept apart so metrics.csv is reproducible)
//   ckpt_<step>.igmc     periodic checkpoints
//   last.igmc            most recent checkpoint

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "igm/checkpoint.hpp"
#include "igm/config.hpp"
#include "igm/dataset_io.hpp"
#include "igm/diffusion.hpp"
#include "igm/losses.hpp"
#include "igm/net.hpp"
#include "igm/skeleton.hpp"

namespace igm {

// ---------------------------------------------------------------------------
// Data preparation.

/// Standard deviation of every valid coordinate in the set, the unit of model space.
inline double coordinate_scale(const std::vector<SkeletonSequence>& set) {
  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (const auto& s : set)
    for (int t = 0; t < s.frames; ++t)
      for (int v = 0; v < s.joints; ++v) {
        if (!s.valid(t, v)) continue;
        for (int c = 0; c < s.channels; ++c) {
          sum += s.at(t, v, c);
          sq += s.at(t, v, c) * s.at(t, v, c);
          ++n;
        }
      }
  if (n < 2) throw ConfigError("not enough coordinates to estimate the data scale");
  const double mean = sum / double(n);
  const double sd = std::sqrt(std::max(0.0, sq / double(n) - mean * mean));
  if (!(sd > 0)) throw NumericError("training coordinates have zero spread");
  return sd;
}

/// Downsample to `frames` (0 keeps the length) and divide by the data scale.
inline std::vector<SkeletonSequence> to_model_units(const std::vector<SkeletonSequence>& set, int frames,
                                                    double data_scale) {
  std::vector<SkeletonSequence> out;
  out.reserve(set.size());
  for (const auto& s : set) out.push_back(scaled(frames > 0 ? temporal_downsample(s, frames) : s, 1.0 / data_scale));
  return out;
}

inline SkeletonSequence to_meters(const SkeletonSequence& s, double data_scale) { return scaled(s, data_scale); }

/// Copies the coordinates of a T x (V*C) matrix into a sequence of the given shape.
template <typename S>
SkeletonSequence matrix_sequence(const ad::Mat<S>& m, int frames, int joints, int channels, int label = 0) {
  if (m.rows() != frames || m.cols() != joints * channels) throw ConfigError("matrix does not match sequence shape");
  SkeletonSequence s(frames, joints, channels, label);
  for (Eigen::Index i = 0; i < m.size(); ++i) s.data[std::size_t(i)] = double(m.data()[i]);
  return s;
}

inline std::vector<int> labels_of(const std::vector<SkeletonSequence>& set) {
  std::vector<int> y;
  y.reserve(set.size());
  for (const auto& s : set) y.push_back(s.label);
  return y;
}

// ---------------------------------------------------------------------------
// Adam.

struct AdamState {
  std::vector<ad::Mat<float>> m, v;
  int step = 0;
};

inline AdamState make_adam_state(const ad::ParamStore<float>& p) { return {p.zeros_like(), p.zeros_like(), 0}; }

/// One Adam step with L2 weight decay folded into the gradient.
inline void adam_update(ad::ParamStore<float>& p, const ad::Grads<float>& g, AdamState& s, const OptimConfig& o) {
  ++s.step;
  const double bc1 = 1.0 - std::pow(o.beta1, s.step), bc2 = 1.0 - std::pow(o.beta2, s.step);
  const float b1 = float(o.beta1), b2 = float(o.beta2);
  const float step_size = float(o.lr / bc1), inv_bc2 = float(1.0 / bc2), wd = float(o.weight_decay);
  for (int k = 0; k < p.size(); ++k) {
    auto& w = p.value(k);
    ad::Mat<float> grad = g[k];
    if (wd != 0.0f) grad += wd * w;
    s.m[k] = b1 * s.m[k] + (1.0f - b1) * grad;
    s.v[k] = b2 * s.v[k] + (1.0f - b2) * grad.cwiseProduct(grad);
    w.array() -= step_size * s.m[k].array() / ((s.v[k].array() * inv_bc2).sqrt() + 1e-8f);
  }
}

// ---------------------------------------------------------------------------
// Metrics.

struct MetricsRow {
  int step = 0;
  double gen = 0, feat = 0, dist = 0, total = 0;
  double wall_seconds = 0;
  std::uint64_t seed = 0;
};

inline const char* kMetricsHeader = "step,gen,feat,dist,total,seed";

inline std::string format_metrics_row(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%llu", r.step, r.gen, r.feat, r.dist, r.total,
                static_cast<unsigned long long>(r.seed));
  return buf;
}

/// Keeps the header and every row with step <= last_step; used when resuming.
inline void truncate_metrics(const std::string& path, int last_step) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (keep.empty()) {
      keep.push_back(line);
      continue;
    }
    if (line.empty()) continue;
    if (std::stoi(line.substr(0, line.find(','))) <= last_step) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

// ---------------------------------------------------------------------------
// Model state.

/// Everything needed to run a trained model.
struct TrainedModel {
  RunConfig run;
  ModelConfig cfg;
  ad::ParamStore<float> params;
  NoiseSchedule sched;
  double data_scale = 1.0;
  int num_classes = 0;
  int step = 0;
};

inline nlohmann::json checkpoint_meta(const TrainedModel& m) {
  return {{"format", "igm-checkpoint"},
          {"config", to_json(m.run)},
          {"frames", m.cfg.frames},
          {"joints", m.cfg.joints},
          {"channels", m.cfg.channels},
          {"num_classes", m.num_classes},
          {"data_scale", m.data_scale},
          {"step", m.step}};
}

inline TrainedModel model_from_checkpoint(const Checkpoint& ck) {
  TrainedModel m;
  try {
    m.run = config_from_json(ck.meta.at("config"));
    m.cfg = model_config(m.run, ck.meta.at("frames").get<int>(), ck.meta.at("joints").get<int>(),
                         ck.meta.at("channels").get<int>());
    m.data_scale = ck.meta.at("data_scale").get<double>();
    m.num_classes = ck.meta.at("num_classes").get<int>();
    m.step = ck.meta.at("step").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint metadata is incomplete: ") + e.what());
  }
  m.sched = make_schedule(m.run.schedule);
  m.params = ck.params;
  const auto expected = init_model<float>(m.cfg, 0);
  if (expected.size() != m.params.size()) throw IoError("checkpoint parameters do not match its config");
  for (int i = 0; i < expected.size(); ++i) {
    const auto& want = expected.value(i);
    const auto& got = m.params[expected.name(i)];
    if (want.rows() != got.rows() || want.cols() != got.cols())
      throw IoError("checkpoint parameter '" + expected.name(i) + "' has the wrong shape");
  }
  return m;
}

inline TrainedModel load_model(const std::string& path) { return model_from_checkpoint(load_checkpoint(path)); }

// ---------------------------------------------------------------------------
// Pretraining.

struct TrainOptions {
  std::string out_dir;
  bool resume = false;
  int stop_after = -1;  // stop (and checkpoint) once this many steps are done; -1 = run to the end
  std::ostream* log = nullptr;
  int log_every = 100;
};

struct TrainResult {
  std::string checkpoint;
  int steps_done = 0;
  std::vector<MetricsRow> rows;  // rows produced by this call
};

inline std::string checkpoint_name(int step) {
  std::ostringstream os;
  os << "ckpt_" << std::setw(6) << std::setfill('0') << step << ".igmc";
  return os.str();
}

/// The `batch` sample indices used at `step`, drawn without replacement.
inline std::vector<int> batch_indices(std::uint64_t seed, int step, int n, int batch) {
  if (batch > n) throw ConfigError("batch size " + std::to_string(batch) + " exceeds dataset size " + std::to_string(n));
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(seed, {std::uint64_t(step), 0xba7cULL});
  for (int i = 0; i < batch; ++i) std::swap(idx[i], idx[uniform_int(rng, i, n - 1)]);
  idx.resize(batch);
  return idx;
}

/// Optimizes the weighted objective on `train` (meters). Everything random is keyed by
/// (seed, step, sample slot), so a resumed run continues the exact same trajectory.
inline TrainResult pretrain(const RunConfig& run, const Dataset& train, const TrainOptions& opt) {
  namespace fs = std::filesystem;
  run.validate();
  if (opt.out_dir.empty()) throw ConfigError("output directory is required");
  if (train.samples.empty()) throw ConfigError("training set is empty");
  validate_dataset(train.samples);
  fs::create_directories(opt.out_dir);
  const fs::path out(opt.out_dir);

  TrainedModel model;
  model.run = run;
  model.num_classes = train.manifest.num_classes;
  AdamState adam;
  const std::string last_path = (out / "last.igmc").string();
  if (opt.resume && fs::exists(last_path)) {
    const Checkpoint ck = load_checkpoint(last_path);
    model = model_from_checkpoint(ck);
    if (to_json(model.run) != to_json(run)) throw ConfigError("resume config differs from the checkpointed run");
    if (!ck.has_optimizer_state()) throw IoError("checkpoint has no optimizer state to resume from");
    adam = {ck.adam_m, ck.adam_v, model.step};
    truncate_metrics((out / "metrics.csv").string(), model.step);
    truncate_metrics((out / "timing.csv").string(), model.step);
  } else {
    fs::remove(last_path);
    model.data_scale = coordinate_scale(train.samples);
    const int frames = run.data.frames > 0 ? run.data.frames : train.frames();
    model.cfg = model_config(run, frames, train.joints(), train.channels());
    model.sched = make_schedule(run.schedule);
    model.params = init_model<float>(model.cfg, derive_seed(run.seed, {0x1417ULL}));
    adam = make_adam_state(model.params);
    std::ofstream(out / "metrics.csv", std::ios::trunc) << kMetricsHeader << '\n';
    std::ofstream(out / "timing.csv", std::ios::trunc) << "step,wall_seconds\n";
  }
  std::ofstream(out / "config.json", std::ios::trunc) << to_json(run).dump(2) << '\n';

  const auto data = to_model_units(train.samples, model.cfg.frames, model.data_scale);
  const int threads = run.worker_threads();
  const int end = opt.stop_after >= 0 ? std::min(opt.stop_after, run.optim.steps) : run.optim.steps;

  auto save = [&](const std::string& path) {
    Checkpoint ck;
    ck.meta = checkpoint_meta(model);
    ck.params = model.params;
    ck.adam_m = adam.m;
    ck.adam_v = adam.v;
    save_checkpoint(path, ck);
  };
  std::string last_good = fs::exists(last_path) ? last_path : "";

  TrainResult result;
  std::ofstream metrics(out / "metrics.csv", std::ios::app);
  std::ofstream timing(out / "timing.csv", std::ios::app);
  const auto t0 = std::chrono::steady_clock::now();
  while (model.step < end) {
    const int step = model.step;
    const auto idx = batch_indices(run.seed, step, int(data.size()), run.optim.batch);
    std::vector<TrainingSample<float>> batch;
    batch.reserve(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      Rng rng = make_rng(run.seed, {std::uint64_t(step), std::uint64_t(i), 0x5a3eULL});
      batch.push_back(draw_training_sample<float>(data[idx[i]], run.augment, model.cfg, rng));
    }
    LossReport<float> rep;
    try {
      rep = total_loss(model.params, model.cfg, model.sched, run.loss, batch, true, threads);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at step " + std::to_string(step) + "; last good checkpoint: " +
                         (last_good.empty() ? "none" : last_good));
    }
    adam_update(model.params, rep.grads, adam, run.optim);
    if (!model.params.all_finite())
      throw NumericError("parameters became non-finite at step " + std::to_string(step) +
                         "; last good checkpoint: " + (last_good.empty() ? "none" : last_good));
    model.step = step + 1;

    MetricsRow row{model.step, rep.gen, rep.feat, rep.dist, rep.total,
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), run.seed};
    metrics << format_metrics_row(row) << '\n';
    timing << row.step << ',' << row.wall_seconds << '\n';
    result.rows.push_back(row);
    if (opt.log && (model.step % opt.log_every == 0 || model.step == end))
      *opt.log << "step " << model.step << "/" << run.optim.steps << " total " << rep.total << " gen " << rep.gen
               << " feat " << rep.feat << " dist " << rep.dist << std::endl;

    if (model.step % run.optim.checkpoint_every == 0 || model.step == end) {
      metrics.flush();
      timing.flush();
      save((out / checkpoint_name(model.step)).string());
      save(last_path);
      last_good = last_path;
    }
  }
  if (!fs::exists(last_path)) save(last_path);
  result.checkpoint = last_path;
  result.steps_done = model.step;
  return result;
}

/// Loads the configured training set, applying the configured downsampling check.
inline Dataset load_training_set(const RunConfig& run) {
  Dataset ds = load_dataset(run.data.train);
  if (run.data.frames > ds.frames())
    throw ConfigError("data.frames " + std::to_string(run.data.frames) + " exceeds stored length " +
                      std::to_string(ds.frames()));
  return ds;
}

}  // namespace igm
