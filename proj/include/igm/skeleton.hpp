#pragma once

// Skeleton sequences and the synthetic motion datasets everything else trains on.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <set>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "igm/error.hpp"
#include "igm/rng.hpp"

namespace igm {

/// A single-body joint trajectory: T frames x V joints x C channels (meters), a per-(t, v)
/// validity mask and a class label. Masked entries always hold zeros.
struct SkeletonSequence {
  int frames = 0;
  int joints = 0;
  int channels = 3;
  std::vector<double> data;       // row-major [t][v][c]
  std::vector<std::uint8_t> mask;  // row-major [t][v], 1 = valid
  int label = 0;

  SkeletonSequence() = default;
  SkeletonSequence(int t, int v, int c = 3, int lbl = 0)
      : frames(t), joints(v), channels(c), data(std::size_t(t) * v * c, 0.0),
        mask(std::size_t(t) * v, 1), label(lbl) {}

  double& at(int t, int v, int c) { return data[(std::size_t(t) * joints + v) * channels + c]; }
  double at(int t, int v, int c) const { return data[(std::size_t(t) * joints + v) * channels + c]; }
  bool valid(int t, int v) const { return mask[std::size_t(t) * joints + v] != 0; }
  void set_valid(int t, int v, bool on) { mask[std::size_t(t) * joints + v] = on ? 1 : 0; }

  Eigen::Vector3d point(int t, int v) const { return {at(t, v, 0), at(t, v, 1), at(t, v, 2)}; }
  void set_point(int t, int v, const Eigen::Vector3d& p) {
    at(t, v, 0) = p.x();
    at(t, v, 1) = p.y();
    at(t, v, 2) = p.z();
  }

  std::size_t size() const { return data.size(); }
  bool same_shape(const SkeletonSequence& o) const {
    return frames == o.frames && joints == o.joints && channels == o.channels;
  }
  bool operator==(const SkeletonSequence& o) const = default;
};

/// Throws if any invariant of a sequence is broken.
inline void validate(const SkeletonSequence& s) {
  if (s.frames < 1 || s.joints < 1 || s.channels < 1) throw ConfigError("sequence has empty shape");
  if (s.data.size() != std::size_t(s.frames) * s.joints * s.channels ||
      s.mask.size() != std::size_t(s.frames) * s.joints)
    throw ConfigError("sequence buffers do not match its shape");
  for (double x : s.data)
    if (!std::isfinite(x)) throw NumericError("sequence contains a non-finite coordinate");
  for (int t = 0; t < s.frames; ++t)
    for (int v = 0; v < s.joints; ++v)
      if (!s.valid(t, v))
        for (int c = 0; c < s.channels; ++c)
          if (s.at(t, v, c) != 0.0) throw ConfigError("masked joint holds non-zero coordinates");
}

inline void validate_dataset(const std::vector<SkeletonSequence>& set) {
  for (const auto& s : set) {
    validate(s);
    if (!s.same_shape(set.front())) throw ConfigError("dataset mixes sequence shapes");
  }
}

// ---------------------------------------------------------------------------
// Skeleton topology (15 joints, y up).

namespace joint {
inline constexpr int kPelvis = 0, kNeck = 1, kHead = 2;
inline constexpr int kLShoulder = 3, kLElbow = 4, kLHand = 5;
inline constexpr int kRShoulder = 6, kRElbow = 7, kRHand = 8;
inline constexpr int kLHip = 9, kLKnee = 10, kLFoot = 11;
inline constexpr int kRHip = 12, kRKnee = 13, kRFoot = 14;
inline constexpr int kCount = 15;
}  // namespace joint

inline const std::array<Eigen::Vector3d, joint::kCount>& rest_pose() {
  static const std::array<Eigen::Vector3d, joint::kCount> pose = {
      Eigen::Vector3d(0.0, 0.0, 0.0),    Eigen::Vector3d(0.0, 0.5, 0.0),
      Eigen::Vector3d(0.0, 0.72, 0.0),   Eigen::Vector3d(0.18, 0.45, 0.0),
      Eigen::Vector3d(0.2, 0.17, 0.0),   Eigen::Vector3d(0.2, -0.1, 0.0),
      Eigen::Vector3d(-0.18, 0.45, 0.0), Eigen::Vector3d(-0.2, 0.17, 0.0),
      Eigen::Vector3d(-0.2, -0.1, 0.0),  Eigen::Vector3d(0.1, 0.0, 0.0),
      Eigen::Vector3d(0.1, -0.45, 0.0),  Eigen::Vector3d(0.1, -0.9, 0.0),
      Eigen::Vector3d(-0.1, 0.0, 0.0),   Eigen::Vector3d(-0.1, -0.45, 0.0),
      Eigen::Vector3d(-0.1, -0.9, 0.0)};
  return pose;
}

// Left/right joint pairs swapped by a mirror flip.
inline constexpr std::array<std::pair<int, int>, 6> kMirrorPairs = {
    {{3, 6}, {4, 7}, {5, 8}, {9, 12}, {10, 13}, {11, 14}}};

/// Joint-index set for a named body part. Unknown names are a configuration error.
inline std::vector<int> body_part(const std::string& name) {
  if (name == "right_arm") return {joint::kRShoulder, joint::kRElbow, joint::kRHand};
  if (name == "left_arm") return {joint::kLShoulder, joint::kLElbow, joint::kLHand};
  if (name == "right_leg") return {joint::kRHip, joint::kRKnee, joint::kRFoot};
  if (name == "left_leg") return {joint::kLHip, joint::kLKnee, joint::kLFoot};
  if (name == "trunk") return {joint::kPelvis, joint::kNeck, joint::kHead};
  throw ConfigError("unknown body part '" + name + "'");
}

inline Eigen::Matrix3d axis_rotation(int axis, double angle) {
  return Eigen::AngleAxisd(angle, Eigen::Vector3d::Unit(axis)).toRotationMatrix();
}

// ---------------------------------------------------------------------------
// Synthetic motion families.

inline constexpr int kMaxMotionFamilies = 8;

inline const char* motion_family_name(int k) {
  static constexpr const char* names[kMaxMotionFamilies] = {
      "arm_wave", "leg_swing", "bend", "jump", "turn", "still_tremor", "clap", "squat"};
  return names[k];
}

namespace detail {

struct MotionJitter {
  double amplitude, cycles, phase, scale, yaw, sway;
};

using Pose = std::array<Eigen::Vector3d, joint::kCount>;

inline void rotate_about(Pose& pose, std::initializer_list<int> moving, int pivot,
                         const Eigen::Matrix3d& rot) {
  const Eigen::Vector3d p = pose[pivot];
  for (int j : moving) pose[j] = p + rot * (pose[j] - p);
}

// One frame of family `k` at normalized time u in [0, 1).
inline Pose motion_frame(int k, double u, const MotionJitter& jit, Rng& tremor_rng) {
  using namespace joint;
  constexpr double kTau = 2.0 * std::numbers::pi;
  Pose pose = rest_pose();
  const double w = kTau * jit.cycles * u + jit.phase;
  const double a = jit.amplitude;
  const double osc = std::sin(w);
  const double half = 0.5 - 0.5 * std::cos(w);

  // Idle arm sway shared by every family so pose alone is not a giveaway.
  rotate_about(pose, {kLElbow, kLHand}, kLShoulder, axis_rotation(0, jit.sway * std::sin(w * 0.5)));
  rotate_about(pose, {kRElbow, kRHand}, kRShoulder, axis_rotation(0, -jit.sway * std::sin(w * 0.5)));

  switch (k) {
    case 0:  // arm wave: raise the right arm sideways, wave the forearm
      rotate_about(pose, {kRElbow, kRHand}, kRShoulder, axis_rotation(2, -a * 2.2));
      rotate_about(pose, {kRHand}, kRElbow, axis_rotation(2, -a * 0.7 * std::sin(2.0 * w)));
      break;
    case 1:  // leg swing: right hip flexion
      rotate_about(pose, {kRKnee, kRFoot}, kRHip, axis_rotation(0, -a * 0.7 * osc));
      rotate_about(pose, {kRFoot}, kRKnee, axis_rotation(0, a * 0.3 * half));
      break;
    case 2:  // bend: trunk flexion about the pelvis
      rotate_about(pose,
                   {kNeck, kHead, kLShoulder, kLElbow, kLHand, kRShoulder, kRElbow, kRHand},
                   kPelvis, axis_rotation(0, a * 0.9 * half));
      break;
    case 3:  // jump: knees flex while both arms swing up
      rotate_about(pose, {kLKnee, kLFoot}, kLHip, axis_rotation(0, -a * 0.6 * half));
      rotate_about(pose, {kRKnee, kRFoot}, kRHip, axis_rotation(0, -a * 0.6 * half));
      rotate_about(pose, {kLFoot}, kLKnee, axis_rotation(0, a * 1.1 * half));
      rotate_about(pose, {kRFoot}, kRKnee, axis_rotation(0, a * 1.1 * half));
      rotate_about(pose, {kLElbow, kLHand}, kLShoulder, axis_rotation(0, -a * 2.0 * half));
      rotate_about(pose, {kRElbow, kRHand}, kRShoulder, axis_rotation(0, -a * 2.0 * half));
      break;
    case 4: {  // turn: progressive yaw of the whole body
      const Eigen::Matrix3d r = axis_rotation(1, a * std::numbers::pi * u + 0.4 * osc);
      for (auto& p : pose) p = r * p;
      break;
    }
    case 5:  // still with tremor in the hands
      for (int j : {kLHand, kRHand, kLElbow, kRElbow})
        for (int c = 0; c < 3; ++c) pose[j][c] += gaussian(tremor_rng, 0.0, 0.03 * a);
      break;
    case 6:  // clap: both arms forward, hands meet in front
      rotate_about(pose, {kLElbow, kLHand}, kLShoulder, axis_rotation(0, -a * 1.4));
      rotate_about(pose, {kRElbow, kRHand}, kRShoulder, axis_rotation(0, -a * 1.4));
      rotate_about(pose, {kLElbow, kLHand}, kLShoulder, axis_rotation(1, -0.6 * half));
      rotate_about(pose, {kRElbow, kRHand}, kRShoulder, axis_rotation(1, 0.6 * half));
      break;
    case 7:  // squat: hips and knees bend together, trunk leans slightly
      rotate_about(pose, {kLKnee, kLFoot}, kLHip, axis_rotation(0, -a * 1.0 * half));
      rotate_about(pose, {kRKnee, kRFoot}, kRHip, axis_rotation(0, -a * 1.0 * half));
      rotate_about(pose, {kLFoot}, kLKnee, axis_rotation(0, a * 1.6 * half));
      rotate_about(pose, {kRFoot}, kRKnee, axis_rotation(0, a * 1.6 * half));
      rotate_about(pose,
                   {kNeck, kHead, kLShoulder, kLElbow, kLHand, kRShoulder, kRElbow, kRHand},
                   kPelvis, axis_rotation(0, a * 0.3 * half));
      break;
    default:
      break;
  }
  return pose;
}

inline float round_to_float(double x) { return static_cast<float>(x); }

}  // namespace detail

/// Parameters of the per-sample jitter applied on top of each motion family.
struct SyntheticDataOptions {
  double amplitude_jitter = 0.3;  // amplitude ~ U[1 - j, 1 + j]
  double min_cycles = 0.8, max_cycles = 1.6;
  double scale_jitter = 0.1;
  double max_yaw = 0.6;           // radians of view variation
  double max_sway = 0.35;
  double sensor_noise = 0.015;    // meters, per coordinate
};

/// Deterministic labeled dataset: n_per_class sequences of each of the first K motion
/// families, interleaved by class. Coordinates are root-centered per frame and rounded to
/// float precision so the stored file round-trips bit-exactly.
inline std::vector<SkeletonSequence> generate_synthetic_dataset(
    int num_classes, int n_per_class, int frames, int joints, std::uint64_t seed,
    const SyntheticDataOptions& opt = {}) {
  if (num_classes < 2 || num_classes > kMaxMotionFamilies)
    throw ConfigError("class count must be in [2, " + std::to_string(kMaxMotionFamilies) + "]");
  if (n_per_class < 1) throw ConfigError("per-class sample count must be >= 1");
  if (frames < 2) throw ConfigError("frame count must be >= 2");
  if (joints < 1 || joints > joint::kCount)
    throw ConfigError("joint count must be in [1, " + std::to_string(joint::kCount) + "]");

  std::vector<SkeletonSequence> out;
  out.reserve(std::size_t(num_classes) * n_per_class);
  for (int i = 0; i < n_per_class; ++i) {
    for (int k = 0; k < num_classes; ++k) {
      Rng rng = make_rng(seed, {std::uint64_t(k), std::uint64_t(i), 0xda7aULL});
      detail::MotionJitter jit{
          uniform(rng, 1.0 - opt.amplitude_jitter, 1.0 + opt.amplitude_jitter),
          uniform(rng, opt.min_cycles, opt.max_cycles),
          uniform(rng, 0.0, 2.0 * std::numbers::pi),
          uniform(rng, 1.0 - opt.scale_jitter, 1.0 + opt.scale_jitter),
          uniform(rng, -opt.max_yaw, opt.max_yaw),
          uniform(rng, 0.0, opt.max_sway)};
      const Eigen::Matrix3d view = axis_rotation(1, jit.yaw);
      SkeletonSequence seq(frames, joints, 3, k);
      for (int t = 0; t < frames; ++t) {
        const double u = double(t) / frames;
        auto pose = detail::motion_frame(k, u, jit, rng);
        const Eigen::Vector3d root = pose[joint::kPelvis];
        for (int v = 0; v < joints; ++v) {
          Eigen::Vector3d p = view * ((pose[v] - root) * jit.scale);
          for (int c = 0; c < 3; ++c) p[c] += gaussian(rng, 0.0, opt.sensor_noise);
          if (v == joint::kPelvis) p.setZero();
          for (int c = 0; c < 3; ++c) seq.at(t, v, c) = detail::round_to_float(p[c]);
        }
      }
      out.push_back(std::move(seq));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation.

struct AugmentationSpec {
  double rotate_max_rad = 0.3;
  double shear_max = 0.1;
  std::pair<double, double> crop_ratio_range{0.8, 1.0};
  double mask_joint_prob = 0.1;
  double flip_prob = 0.5;
  bool enable_rotate = true;
  bool enable_shear = true;
  bool enable_crop = true;
  bool enable_mask = true;
  bool enable_flip = true;

  static AugmentationSpec disabled() {
    AugmentationSpec s;
    s.enable_rotate = s.enable_shear = s.enable_crop = s.enable_mask = s.enable_flip = false;
    return s;
  }

  void validate() const {
    if (mask_joint_prob < 0 || mask_joint_prob > 1 || flip_prob < 0 || flip_prob > 1)
      throw ConfigError("augmentation probabilities must lie in [0, 1]");
    auto [lo, hi] = crop_ratio_range;
    if (!(lo > 0 && hi <= 1 && lo <= hi)) throw ConfigError("crop ratios must satisfy 0 < low <= high <= 1");
    if (rotate_max_rad < 0 || shear_max < 0) throw ConfigError("rotation/shear bounds must be >= 0");
  }
};

/// Applies one linear map to every valid (t, v) coordinate.
inline SkeletonSequence apply_linear(const SkeletonSequence& seq, const Eigen::Matrix3d& m) {
  SkeletonSequence out = seq;
  for (int t = 0; t < seq.frames; ++t)
    for (int v = 0; v < seq.joints; ++v)
      if (seq.valid(t, v)) out.set_point(t, v, m * seq.point(t, v));
  return out;
}

inline SkeletonSequence rotate(const SkeletonSequence& seq, int axis, double angle) {
  return apply_linear(seq, axis_rotation(axis, angle));
}

/// Mirror across the sagittal plane: negate x and swap left/right joints.
inline SkeletonSequence mirror(const SkeletonSequence& seq) {
  SkeletonSequence out = seq;
  auto partner = [&](int v) {
    for (auto [a, b] : kMirrorPairs) {
      if (v == a && b < seq.joints) return b;
      if (v == b && a < seq.joints) return a;
    }
    return v;
  };
  for (int t = 0; t < seq.frames; ++t)
    for (int v = 0; v < seq.joints; ++v) {
      const int src = partner(v);
      out.set_valid(t, v, seq.valid(t, src));
      Eigen::Vector3d p = seq.point(t, src);
      p.x() = -p.x();
      out.set_point(t, v, seq.valid(t, src) ? p : Eigen::Vector3d::Zero());
    }
  return out;
}

/// Contiguous window [start, start + len) linearly resampled back to the original length.
inline SkeletonSequence crop_resample(const SkeletonSequence& seq, int start, int len) {
  len = std::clamp(len, 2, seq.frames);
  start = std::clamp(start, 0, seq.frames - len);
  SkeletonSequence out = seq;
  for (int t = 0; t < seq.frames; ++t) {
    const double pos = seq.frames == 1 ? start : start + double(t) * (len - 1) / (seq.frames - 1);
    const int lo = std::min(int(std::floor(pos)), seq.frames - 1);
    const int hi = std::min(lo + 1, start + len - 1);
    const double frac = pos - lo;
    for (int v = 0; v < seq.joints; ++v) {
      const bool ok = seq.valid(lo, v) && seq.valid(hi, v);
      out.set_valid(t, v, ok);
      for (int c = 0; c < seq.channels; ++c)
        out.at(t, v, c) = ok ? (1.0 - frac) * seq.at(lo, v, c) + frac * seq.at(hi, v, c) : 0.0;
    }
  }
  return out;
}

/// Random augmentation: crop, then one rotation+shear map, then flip, then joint masking.
inline SkeletonSequence augment(const SkeletonSequence& seq, const AugmentationSpec& spec, Rng& rng) {
  spec.validate();
  SkeletonSequence out = seq;
  if (spec.enable_crop) {
    const double ratio = uniform(rng, spec.crop_ratio_range.first,
                                 std::nextafter(spec.crop_ratio_range.second, 2.0));
    const int len = std::max(2, int(std::lround(ratio * seq.frames)));
    const int start = uniform_int(rng, 0, std::max(0, seq.frames - len));
    out = crop_resample(out, start, len);
  }
  if (spec.enable_rotate || spec.enable_shear) {
    Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
    if (spec.enable_rotate) {
      const double m_rad = spec.rotate_max_rad;
      m = axis_rotation(2, uniform(rng, -m_rad, m_rad)) * axis_rotation(1, uniform(rng, -m_rad, m_rad)) *
          axis_rotation(0, uniform(rng, -m_rad, m_rad));
    }
    if (spec.enable_shear) {
      Eigen::Matrix3d sh = Eigen::Matrix3d::Identity();
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          if (i != j) sh(i, j) = uniform(rng, -spec.shear_max, spec.shear_max);
      m = sh * m;
    }
    out = apply_linear(out, m);
  }
  if (spec.enable_flip && bernoulli(rng, spec.flip_prob)) out = mirror(out);
  if (spec.enable_mask) {
    for (int t = 0; t < out.frames; ++t)
      for (int v = 0; v < out.joints; ++v)
        if (bernoulli(rng, spec.mask_joint_prob)) {
          out.set_valid(t, v, false);
          for (int c = 0; c < out.channels; ++c) out.at(t, v, c) = 0.0;
        }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corruption.

struct JointNoise {
  double p = 1.0;
  double sigma2 = 0.1;
};

struct PartOcclusion {
  std::string part;
  std::vector<int> joints;  // resolved from `part` when empty
};

struct CorruptionSpec {
  std::variant<JointNoise, PartOcclusion> kind = JointNoise{};

  static CorruptionSpec joint_noise(double p, double sigma2) { return {JointNoise{p, sigma2}}; }
  static CorruptionSpec occlusion(const std::string& part) { return {PartOcclusion{part, body_part(part)}}; }

  std::string describe() const {
    if (auto* n = std::get_if<JointNoise>(&kind))
      return "joint_noise(" + std::to_string(n->p) + "," + std::to_string(n->sigma2) + ")";
    return "part_occlusion(" + std::get<PartOcclusion>(kind).part + ")";
  }
};

/// Joint noise adds N(0, sigma2) to every coordinate of each joint selected independently
/// per (t, v) with probability p; part occlusion zeroes the listed joints in every frame.
inline SkeletonSequence corrupt(const SkeletonSequence& seq, const CorruptionSpec& spec, Rng& rng) {
  SkeletonSequence out = seq;
  if (auto* n = std::get_if<JointNoise>(&spec.kind)) {
    if (n->p < 0 || n->p > 1) throw ConfigError("joint noise probability must lie in [0, 1]");
    if (n->sigma2 < 0) throw ConfigError("joint noise variance must be >= 0");
    const double sd = std::sqrt(n->sigma2);
    for (int t = 0; t < seq.frames; ++t)
      for (int v = 0; v < seq.joints; ++v)
        if (seq.valid(t, v) && bernoulli(rng, n->p))
          for (int c = 0; c < seq.channels; ++c) out.at(t, v, c) += gaussian(rng, 0.0, sd);
    return out;
  }
  const auto& occ = std::get<PartOcclusion>(spec.kind);
  const std::vector<int> part = occ.joints.empty() ? body_part(occ.part) : occ.joints;
  for (int v : part) {
    if (v < 0 || v >= seq.joints) throw ConfigError("occluded joint index out of range");
    for (int t = 0; t < seq.frames; ++t) {
      out.set_valid(t, v, false);
      for (int c = 0; c < seq.channels; ++c) out.at(t, v, c) = 0.0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Frame indices picked by uniform-stride downsampling from `frames` to `target`.
inline std::vector<int> downsample_indices(int frames, int target) {
  std::vector<int> idx(target);
  for (int i = 0; i < target; ++i) idx[i] = int((std::int64_t(i) * frames) / target);
  return idx;
}

inline SkeletonSequence temporal_downsample(const SkeletonSequence& seq, int target_frames) {
  if (target_frames < 1) throw ConfigError("target frame count must be >= 1");
  if (target_frames > seq.frames)
    throw ConfigError("cannot downsample " + std::to_string(seq.frames) + " frames to " +
                      std::to_string(target_frames));
  SkeletonSequence out(target_frames, seq.joints, seq.channels, seq.label);
  const auto idx = downsample_indices(seq.frames, target_frames);
  for (int t = 0; t < target_frames; ++t)
    for (int v = 0; v < seq.joints; ++v) {
      out.set_valid(t, v, seq.valid(idx[t], v));
      for (int c = 0; c < seq.channels; ++c) out.at(t, v, c) = seq.at(idx[t], v, c);
    }
  return out;
}

/// Uniform coordinate scaling (used to move between meters and model units).
inline SkeletonSequence scaled(const SkeletonSequence& seq, double factor) {
  SkeletonSequence out = seq;
  for (auto& x : out.data) x *= factor;
  return out;
}

}  // namespace igm
