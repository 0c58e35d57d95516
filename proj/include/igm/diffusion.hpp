#pragma once

// DDPM machinery: linear beta schedule, forward noising, the conditional noise predictor
// g(x_t, h(z), t), one-step clean-data estimate, ancestral sampling and test-time denoising.

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "igm/adapter.hpp"
#include "igm/autodiff.hpp"
#include "igm/error.hpp"
#include "igm/net.hpp"
#include "igm/rng.hpp"

namespace igm {

/// Tables are indexed by step t in [0, steps]; index 0 is the clean-data sentinel
/// (beta = 0, alpha_bar = 1).
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta, alpha, alpha_bar;

  double sqrt_ab(int t) const { return std::sqrt(alpha_bar.at(t)); }
  double sqrt_1mab(int t) const { return std::sqrt(1.0 - alpha_bar.at(t)); }
};

/// "linear": beta evenly spaced in [beta_min, beta_max]. "cosine": alpha_bar follows the
/// squared-cosine curve with offset 0.008 and beta capped at 0.999; the bounds are ignored.
inline NoiseSchedule make_schedule(int steps, double beta_min = 1e-4, double beta_max = 0.02,
                                   const std::string& kind = "linear") {
  if (steps < 1) throw ConfigError("schedule needs at least one step");
  if (kind != "linear" && kind != "cosine") throw ConfigError("unknown schedule kind '" + kind + "'");
  if (!(beta_min > 0 && beta_max < 1 && beta_min <= beta_max))
    throw ConfigError("betas must satisfy 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.steps = steps;
  s.beta.assign(steps + 1, 0.0);
  s.alpha.assign(steps + 1, 1.0);
  s.alpha_bar.assign(steps + 1, 1.0);
  auto cosine_ab = [steps](int t) {
    const double c = std::cos((double(t) / steps + 0.008) / 1.008 * std::numbers::pi / 2);
    return c * c;
  };
  for (int t = 1; t <= steps; ++t) {
    if (kind == "cosine")
      s.beta[t] = std::min(1.0 - cosine_ab(t) / cosine_ab(t - 1), 0.999);
    else
      s.beta[t] = steps == 1 ? beta_min : beta_min + (beta_max - beta_min) * double(t - 1) / (steps - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    // x0 estimation divides by sqrt(alpha_bar); reject schedules that underflow.
    if (!(s.alpha_bar[t] >= std::numeric_limits<double>::min()))
      throw ConfigError("noise schedule underflows: alpha_bar reaches zero at step " + std::to_string(t));
  }
  return s;
}

/// x_t = sqrt(ab) x + sqrt(1 - ab) eps, for an explicit alpha_bar.
template <typename S>
ad::Mat<S> q_sample(const ad::Mat<S>& x, double alpha_bar, const ad::Mat<S>& eps) {
  if (x.rows() != eps.rows() || x.cols() != eps.cols()) throw ConfigError("noise shape differs from data");
  return x * S(std::sqrt(alpha_bar)) + eps * S(std::sqrt(1.0 - alpha_bar));
}

template <typename S>
ad::Mat<S> q_sample(const NoiseSchedule& s, const ad::Mat<S>& x, int t, const ad::Mat<S>& eps) {
  return q_sample(x, s.alpha_bar.at(t), eps);
}

/// x_0 = (x_t - sqrt(1 - ab) eps_hat) / sqrt(ab).
template <typename S>
ad::Mat<S> estimate_x0(const ad::Mat<S>& x_t, const ad::Mat<S>& eps_hat, double alpha_bar) {
  return (x_t - eps_hat * S(std::sqrt(1.0 - alpha_bar))) / S(std::sqrt(alpha_bar));
}

template <typename S>
ad::Var<S> estimate_x0(ad::Var<S> x_t, ad::Var<S> eps_hat, double alpha_bar) {
  return ad::scale(ad::sub(x_t, ad::scale(eps_hat, S(std::sqrt(1.0 - alpha_bar)))), S(1.0 / std::sqrt(alpha_bar)));
}

template <typename S>
ad::Mat<S> gaussian_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  ad::Mat<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = S(gaussian(rng));
  return m;
}

// ---------------------------------------------------------------------------
// Generator g.

/// Predicted noise for x_t (T x V*C) under condition z_hat (1 x dim) at step t.
template <typename S>
ad::Var<S> predict_noise(ad::Tape<S>& tape, const ad::ParamStore<S>& p, const ModelConfig& cfg, ad::Var<S> x_t,
                         ad::Var<S> cond, int t) {
  if (cond.rows() != 1 || cond.cols() != cfg.net.dim)
    throw ConfigError("condition must be 1 x " + std::to_string(cfg.net.dim));
  auto temb = linear(tape, p, "gen.temb", tape.constant(sinusoidal_embedding<S>(t, cfg.net.dim)));
  auto h = embed(tape, p, "gen", cfg, x_t);
  for (int i = 0; i < cfg.net.layers; ++i) {
    const std::string blk = "gen.blk" + std::to_string(i);
    auto site = [&](const std::string& name) {
      const std::string b = blk + "." + name;
      return AdaModulation<S>{linear(tape, p, b + ".cond_scale", cond), linear(tape, p, b + ".cond_shift", cond),
                              linear(tape, p, b + ".time_scale", temb), linear(tape, p, b + ".time_shift", temb)};
    };
    BlockModulation<S> mod{site("norm1"), site("norm2")};
    h = transformer_block(tape, p, blk, cfg.net, h, &mod);
  }
  auto out = linear(tape, p, "gen.head", h);
  return ad::reshape(out, cfg.frames, cfg.row_width());
}

/// Condition vector from the encoder features of x: h(f(x)).
template <typename S>
ad::Var<S> encode_condition(ad::Tape<S>& tape, const ad::ParamStore<S>& p, const ModelConfig& cfg, ad::Var<S> x) {
  return condition_vector(encode(tape, p, cfg, x).tokens, cfg.adapter);
}

template <typename S>
ad::Mat<S> condition_of(const ad::ParamStore<S>& p, const ModelConfig& cfg, const ad::Mat<S>& x) {
  ad::Tape<S> tape;
  return encode_condition(tape, p, cfg, tape.constant(x)).value();
}

template <typename S>
ad::Mat<S> predict_noise(const ad::ParamStore<S>& p, const ModelConfig& cfg, const ad::Mat<S>& x_t,
                         const ad::Mat<S>& cond, int t) {
  ad::Tape<S> tape;
  return predict_noise(tape, p, cfg, tape.constant(x_t), tape.constant(cond), t).value();
}

/// x_0 estimate clamped to [-clip, clip]; clip <= 0 leaves it untouched.
template <typename S>
ad::Mat<S> clipped_x0(const ad::Mat<S>& x_t, const ad::Mat<S>& eps_hat, double alpha_bar, double clip) {
  ad::Mat<S> x0 = estimate_x0(x_t, eps_hat, alpha_bar);
  if (clip > 0) x0 = x0.cwiseMax(S(-clip)).cwiseMin(S(clip));
  return x0;
}

/// One ancestral step x_t -> x_{t-1} through the posterior q(x_{t-1} | x_t, x_0 = x0_hat).
/// Without clipping this equals the usual (x_t - beta_t / sqrt(1 - ab_t) eps_hat) / sqrt(alpha_t)
/// mean. At t = 1 the mean is returned without noise.
template <typename S>
ad::Mat<S> reverse_step(const ad::ParamStore<S>& p, const ModelConfig& cfg, const NoiseSchedule& s,
                        const ad::Mat<S>& x_t, const ad::Mat<S>& cond, int t, Rng& rng, double clip = 0.0) {
  const ad::Mat<S> x0 = clipped_x0(x_t, predict_noise(p, cfg, x_t, cond, t), s.alpha_bar[t], clip);
  const double denom = 1.0 - s.alpha_bar[t];
  const double c0 = std::sqrt(s.alpha_bar[t - 1]) * s.beta[t] / denom;
  const double ct = std::sqrt(s.alpha[t]) * (1.0 - s.alpha_bar[t - 1]) / denom;
  ad::Mat<S> mean = x0 * S(c0) + x_t * S(ct);
  if (t == 1) return mean;
  const double var = s.beta[t] * (1.0 - s.alpha_bar[t - 1]) / denom;
  return mean + gaussian_matrix<S>(mean.rows(), mean.cols(), rng) * S(std::sqrt(var));
}

/// Reverse chain from x_{t_start} down to x_0.
template <typename S>
ad::Mat<S> reverse_chain(const ad::ParamStore<S>& p, const ModelConfig& cfg, const NoiseSchedule& s,
                         ad::Mat<S> x, const ad::Mat<S>& cond, int t_start, Rng& rng, double clip = 0.0) {
  for (int t = t_start; t >= 1; --t) x = reverse_step(p, cfg, s, x, cond, t, rng, clip);
  return x;
}

/// Ancestral DDPM sampling from pure noise, conditioned at every step on `cond`.
template <typename S>
ad::Mat<S> sample(const ad::ParamStore<S>& p, const ModelConfig& cfg, const NoiseSchedule& s,
                  const ad::Mat<S>& cond, Rng& rng, double clip = 0.0) {
  ad::Mat<S> x = gaussian_matrix<S>(cfg.frames, cfg.row_width(), rng);
  return reverse_chain(p, cfg, s, std::move(x), cond, s.steps, rng, clip);
}

/// Single-shot reconstruction: x_0 estimate from pure noise at the last step.
template <typename S>
ad::Mat<S> sample_onestep(const ad::ParamStore<S>& p, const ModelConfig& cfg, const NoiseSchedule& s,
                          const ad::Mat<S>& cond, Rng& rng, double clip = 0.0) {
  ad::Mat<S> x = gaussian_matrix<S>(cfg.frames, cfg.row_width(), rng);
  return clipped_x0(x, predict_noise(p, cfg, x, cond, s.steps), s.alpha_bar[s.steps], clip);
}

/// Test-time denoising: the corrupted data, scaled by sqrt(alpha_bar), stands in for
/// x_{t_start}; the condition comes from encoding the corrupted data itself.
template <typename S>
ad::Mat<S> denoise_tta(const ad::ParamStore<S>& p, const ModelConfig& cfg, const NoiseSchedule& s,
                       const ad::Mat<S>& corrupted, int t_start, Rng& rng, double clip = 0.0) {
  if (t_start < 0 || t_start > s.steps) throw ConfigError("t_start must lie in [0, steps]");
  if (t_start == 0) return corrupted;
  const ad::Mat<S> cond = condition_of(p, cfg, corrupted);
  return reverse_chain(p, cfg, s, ad::Mat<S>(corrupted * S(s.sqrt_ab(t_start))), cond, t_start, rng, clip);
}

}  // namespace igm
