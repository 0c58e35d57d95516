#pragma once

// Evaluation of trained checkpoints: frozen features, k-NN / probe scoring, token spectra,
// the corruption-robustness protocol, masked reconstruction and the ablation grid.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "igm/eval.hpp"
#include "igm/train.hpp"

namespace igm {

// ---------------------------------------------------------------------------
// Features.

/// Pooled unit-norm encoder features f(x), one row per sequence (sequences in model units).
inline MatrixXd pooled_features(const TrainedModel& m, const std::vector<SkeletonSequence>& seqs, int threads = 1) {
  MatrixXd out(Eigen::Index(seqs.size()), m.cfg.net.dim);
  detail::parallel_for(int(seqs.size()), threads, [&](int i) {
    ad::Tape<float> tape;
    const auto enc = encode(tape, m.params, m.cfg, tape.constant(sequence_matrix<float>(seqs[i])));
    out.row(i) = enc.pooled.value().row(0).cast<double>();
  });
  return out;
}

inline MatrixXd pooled_features(const TrainedModel& m, const std::vector<ad::Mat<float>>& mats, int threads = 1) {
  MatrixXd out(Eigen::Index(mats.size()), m.cfg.net.dim);
  detail::parallel_for(int(mats.size()), threads, [&](int i) {
    ad::Tape<float> tape;
    out.row(i) = encode(tape, m.params, m.cfg, tape.constant(mats[i])).pooled.value().row(0).cast<double>();
  });
  return out;
}

/// Token features stacked over sequences: unit-norm encoder tokens z and their high-pass
/// filtered counterparts z_hat.
struct TokenFeatures {
  MatrixXd raw, filtered;
};

inline TokenFeatures token_features(const TrainedModel& m, const std::vector<SkeletonSequence>& seqs,
                                    int threads = 1) {
  const int l = m.cfg.tokens(), d = m.cfg.net.dim;
  TokenFeatures tf{MatrixXd(Eigen::Index(seqs.size()) * l, d), MatrixXd(Eigen::Index(seqs.size()) * l, d)};
  detail::parallel_for(int(seqs.size()), threads, [&](int i) {
    ad::Tape<float> tape;
    const auto enc = encode(tape, m.params, m.cfg, tape.constant(sequence_matrix<float>(seqs[i])));
    auto z = ad::l2_normalize_rows(enc.tokens);
    auto zh = high_pass_fuse(z, m.cfg.adapter.eta, m.cfg.adapter.temperature);
    tf.raw.middleRows(Eigen::Index(i) * l, l) = z.value().cast<double>();
    tf.filtered.middleRows(Eigen::Index(i) * l, l) = zh.value().cast<double>();
  });
  return tf;
}

/// Train/val sets in a trained model's units.
struct EvalData {
  std::vector<SkeletonSequence> train, val;
  std::vector<int> train_y, val_y;
};

inline EvalData prepare_eval_data(const TrainedModel& m, const Dataset& train, const Dataset& val) {
  for (const Dataset* ds : {&train, &val})
    if (ds->joints() != m.cfg.joints || ds->channels() != m.cfg.channels || ds->frames() < m.cfg.frames)
      throw ConfigError("dataset shape does not match the checkpoint");
  EvalData d;
  d.train = to_model_units(train.samples, m.cfg.frames, m.data_scale);
  d.val = to_model_units(val.samples, m.cfg.frames, m.data_scale);
  d.train_y = labels_of(d.train);
  d.val_y = labels_of(d.val);
  return d;
}

struct ClassificationScores {
  double knn = 0, probe = 0;
};

inline ClassificationScores classification_scores(const TrainedModel& m, const EvalData& d, int threads = 1,
                                                  std::uint64_t seed = 0) {
  const MatrixXd ftr = pooled_features(m, d.train, threads);
  const MatrixXd fva = pooled_features(m, d.val, threads);
  ClassificationScores s;
  s.knn = knn_eval(ftr, d.train_y, fva, d.val_y, m.run.eval.knn_k);
  ProbeOptions po;
  po.epochs = m.run.eval.probe_epochs;
  po.lr = m.run.eval.probe_lr;
  po.seed = seed;
  s.probe = linear_probe(ftr, d.train_y, fva, d.val_y, m.num_classes, po);
  return s;
}

// ---------------------------------------------------------------------------
// Corruption robustness.

struct CorruptionOptions {
  bool with_denoise = true;
  std::vector<int> t_start_candidates{2, 4, 6, 8, 12};
  int sweep_samples = 60;  // corrupted train sequences used to pick t_start
  std::uint64_t seed = 0;
  int threads = 1;
};

struct CorruptionRow {
  std::string corruption;
  double direct = 0;    // k-NN accuracy on corrupted val data
  double denoised = 0;  // after test-time denoising (equals direct when disabled)
  int t_start = 0;
  std::vector<std::pair<int, double>> sweep;  // (t_start, accuracy on the sweep subset)
};

namespace detail {

inline std::vector<ad::Mat<float>> corrupted_mats(const std::vector<SkeletonSequence>& seqs,
                                                  const std::vector<int>& idx, const CorruptionSpec& spec,
                                                  std::uint64_t seed, std::uint64_t tag) {
  std::vector<ad::Mat<float>> out;
  for (int i : idx) {
    Rng rng = make_rng(seed, {tag, std::uint64_t(i)});
    out.push_back(sequence_matrix<float>(corrupt(seqs[i], spec, rng)));
  }
  return out;
}

inline std::vector<ad::Mat<float>> denoise_all(const TrainedModel& m, const std::vector<ad::Mat<float>>& in,
                                               int t_start, std::uint64_t seed, int threads) {
  std::vector<ad::Mat<float>> out(in.size());
  parallel_for(int(in.size()), threads, [&](int i) {
    Rng rng = make_rng(seed, {0xde70ULL, std::uint64_t(t_start), std::uint64_t(i)});
    out[i] = denoise_tta(m.params, m.cfg, m.sched, in[i], t_start, rng, m.run.schedule.clip);
  });
  return out;
}

}  // namespace detail

/// For each corruption: k-NN accuracy (clean train features as the reference set) on the
/// corrupted val set, directly and after test-time denoising. t_start is chosen per
/// corruption on corrupted train sequences scored leave-one-out against the train set, so
/// val labels never influence the choice.
inline std::vector<CorruptionRow> corruption_protocol(const TrainedModel& m, const EvalData& d,
                                                      const std::vector<CorruptionSpec>& specs,
                                                      const CorruptionOptions& opt) {
  const int k = m.run.eval.knn_k;
  const MatrixXd ftr = pooled_features(m, d.train, opt.threads);
  std::vector<int> val_idx(d.val.size());
  std::iota(val_idx.begin(), val_idx.end(), 0);
  std::vector<int> sweep_idx;
  const int n_sweep = std::min<int>(opt.sweep_samples, int(d.train.size()));
  for (int i = 0; i < n_sweep; ++i) sweep_idx.push_back(int(std::int64_t(i) * int(d.train.size()) / n_sweep));
  std::vector<int> sweep_y;
  for (int i : sweep_idx) sweep_y.push_back(d.train_y[i]);

  std::vector<CorruptionRow> rows;
  for (std::size_t c = 0; c < specs.size(); ++c) {
    CorruptionRow row;
    row.corruption = specs[c].describe();
    const auto val_c = detail::corrupted_mats(d.val, val_idx, specs[c], opt.seed, 0xc0ULL + c);
    row.direct = accuracy(knn_predict(ftr, d.train_y, pooled_features(m, val_c, opt.threads), k), d.val_y);
    row.denoised = row.direct;
    if (opt.with_denoise) {
      const auto sweep_c = detail::corrupted_mats(d.train, sweep_idx, specs[c], opt.seed, 0x5c0ULL + c);
      double best = -1;
      for (int ts : opt.t_start_candidates) {
        if (ts < 1 || ts > m.sched.steps) continue;
        const auto den = detail::denoise_all(m, sweep_c, ts, opt.seed, opt.threads);
        const double acc =
            accuracy(knn_predict(ftr, d.train_y, pooled_features(m, den, opt.threads), k, sweep_idx), sweep_y);
        row.sweep.push_back({ts, acc});
        if (acc > best) {
          best = acc;
          row.t_start = ts;
        }
      }
      if (row.t_start == 0) throw ConfigError("no t_start candidate lies in [1, steps]");
      const auto den = detail::denoise_all(m, val_c, row.t_start, opt.seed + 1, opt.threads);
      row.denoised = accuracy(knn_predict(ftr, d.train_y, pooled_features(m, den, opt.threads), k), d.val_y);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Masked reconstruction.

/// Random (t, v) region with each cell on independently with probability `ratio`; at
/// least one cell is always on.
inline RegionMask random_region(int frames, int joints, double ratio, Rng& rng) {
  if (ratio <= 0 || ratio > 1) throw ConfigError("mask ratio must lie in (0, 1]");
  RegionMask r(frames, joints);
  for (int t = 0; t < frames; ++t)
    for (int v = 0; v < joints; ++v) r.set(t, v, bernoulli(rng, ratio));
  if (r.count() == 0) r.set(uniform_int(rng, 0, frames - 1), uniform_int(rng, 0, joints - 1));
  return r;
}

/// The region masked for the i-th sequence of a reconstruction run with this seed.
inline RegionMask reconstruction_region(std::uint64_t seed, int i, int frames, int joints, double ratio) {
  Rng rng = make_rng(seed, {0x3a5cULL, std::uint64_t(i)});
  return random_region(frames, joints, ratio, rng);
}

inline SkeletonSequence apply_region_mask(SkeletonSequence s, const RegionMask& r) {
  for (int t = 0; t < s.frames; ++t)
    for (int v = 0; v < s.joints; ++v)
      if (r.at(t, v)) {
        s.set_valid(t, v, false);
        for (int c = 0; c < s.channels; ++c) s.at(t, v, c) = 0.0;
      }
  return s;
}

/// Generates a sequence conditioned on the encoder features of a masked input.
inline ad::Mat<float> reconstruct(const TrainedModel& m, const SkeletonSequence& masked, bool onestep, Rng& rng) {
  const auto cond = condition_of(m.params, m.cfg, sequence_matrix<float>(masked));
  const double clip = m.run.schedule.clip;
  return onestep ? sample_onestep(m.params, m.cfg, m.sched, cond, rng, clip)
                 : sample(m.params, m.cfg, m.sched, cond, rng, clip);
}

/// Per-joint mean position over every frame of every training sequence.
inline SkeletonSequence mean_pose(const std::vector<SkeletonSequence>& train, int frames) {
  const auto& f = train.front();
  SkeletonSequence out(frames, f.joints, f.channels);
  for (int v = 0; v < f.joints; ++v) {
    Eigen::Vector3d sum = Eigen::Vector3d::Zero();
    std::size_t n = 0;
    for (const auto& s : train)
      for (int t = 0; t < s.frames; ++t)
        if (s.valid(t, v)) {
          sum += s.point(t, v);
          ++n;
        }
    const Eigen::Vector3d mean = n ? Eigen::Vector3d(sum / double(n)) : Eigen::Vector3d::Zero();
    for (int t = 0; t < frames; ++t) out.set_point(t, v, mean);
  }
  return out;
}

struct ReconstructionOptions {
  double mask_ratio = 0.4;
  bool onestep = false;
  std::uint64_t seed = 0;
  int threads = 1;
  int max_samples = 0;  // 0 = every val sequence
};

struct ReconstructionResult {
  double model_mpjpe = 0;     // mm, averaged over sequences
  double baseline_mpjpe = 0;  // mm, train mean pose
  int sequences = 0;
  std::vector<SkeletonSequence> generated;  // model units
};

inline ReconstructionResult masked_reconstruction(const TrainedModel& m, const EvalData& d,
                                                  const ReconstructionOptions& opt) {
  const int n = opt.max_samples > 0 ? std::min<int>(opt.max_samples, int(d.val.size())) : int(d.val.size());
  const SkeletonSequence base = mean_pose(d.train, m.cfg.frames);
  std::vector<double> model_err(n), base_err(n);
  ReconstructionResult r;
  r.generated.resize(n);
  detail::parallel_for(n, opt.threads, [&](int i) {
    const RegionMask region = reconstruction_region(opt.seed, i, m.cfg.frames, m.cfg.joints, opt.mask_ratio);
    Rng gen_rng = make_rng(opt.seed, {0x6e0ULL, std::uint64_t(i)});
    const auto pred = reconstruct(m, apply_region_mask(d.val[i], region), opt.onestep, gen_rng);
    r.generated[i] = matrix_sequence(pred, m.cfg.frames, m.cfg.joints, m.cfg.channels, d.val[i].label);
    model_err[i] = mpjpe(r.generated[i], d.val[i], region, m.data_scale);
    base_err[i] = mpjpe(base, d.val[i], region, m.data_scale);
  });
  for (int i = 0; i < n; ++i) {
    r.model_mpjpe += model_err[i] / n;
    r.baseline_mpjpe += base_err[i] / n;
  }
  r.sequences = n;
  return r;
}

// ---------------------------------------------------------------------------
// Ablation grid.

struct AblationVariant {
  std::string name;
  bool ffm = true;
  bool feat = true;
  bool dist = true;
};

/// The five module combinations, in table order.
inline std::vector<AblationVariant> ablation_variants() {
  return {{"none", false, false, false},
          {"ffm", true, false, false},
          {"ffm+feat", true, true, false},
          {"ffm+dist", true, false, true},
          {"ffm+feat+dist", true, true, true}};
}

/// Base config with the variant's modules switched off (eta = 0 and/or zero loss weights).
inline RunConfig ablation_config(RunConfig base, const AblationVariant& v, std::uint64_t seed) {
  if (!v.ffm) base.adapter.eta = 0.0;
  if (!v.feat) base.loss.feat = 0.0;
  if (!v.dist) base.loss.dist = 0.0;
  base.seed = seed;
  return base;
}

struct AblationResult {
  std::string variant;
  std::uint64_t seed = 0;
  double knn = 0, probe = 0;
  std::string checkpoint;
  std::string checkpoint_hash;
};

/// Trains every variant for every seed into out_dir/<variant>/seed<k> (reusing a finished
/// checkpoint when one is present) and scores each on the val set.
inline std::vector<AblationResult> ablation_grid(const RunConfig& base, const Dataset& train, const Dataset& val,
                                                 const std::vector<std::uint64_t>& seeds, const std::string& out_dir,
                                                 std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  std::vector<AblationResult> results;
  for (const auto& v : ablation_variants())
    for (auto seed : seeds) {
      const RunConfig rc = ablation_config(base, v, seed);
      const fs::path dir = fs::path(out_dir) / v.name / ("seed" + std::to_string(seed));
      const std::string ckpt = (dir / "last.igmc").string();
      bool done = false;
      if (fs::exists(ckpt)) {
        const TrainedModel existing = load_model(ckpt);
        done = existing.step == rc.optim.steps && to_json(existing.run) == to_json(rc);
      }
      if (!done) {
        if (log) *log << "training " << v.name << " seed " << seed << std::endl;
        TrainOptions to;
        to.out_dir = dir.string();
        pretrain(rc, train, to);
      }
      const TrainedModel m = load_model(ckpt);
      const auto s = classification_scores(m, prepare_eval_data(m, train, val), rc.worker_threads(), seed);
      results.push_back({v.name, seed, s.knn, s.probe, ckpt, checkpoint_hash(ckpt)});
      if (log) *log << v.name << " seed " << seed << " knn " << s.knn << " probe " << s.probe << std::endl;
    }
  return results;
}

// ---------------------------------------------------------------------------
// CSV.

/// metric,value,seed,ckpt_hash
class MetricsCsv {
 public:
  explicit MetricsCsv(const std::string& path) : out_(path, std::ios::trunc) {
    if (!out_) throw IoError("cannot open '" + path + "' for writing");
    out_ << "metric,value,seed,ckpt_hash\n";
  }
  void row(const std::string& metric, double value, std::uint64_t seed, const std::string& hash) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", value);
    out_ << metric << ',' << buf << ',' << seed << ',' << hash << '\n';
  }

 private:
  std::ofstream out_;
};

}  // namespace igm
