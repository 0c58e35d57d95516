#pragma once

// Training objectives: noise prediction, feature idempotency and distribution idempotency.
//
// Each sample gets its own tape (condition branch, generator, one-step estimate, target and
// idempotency encoder passes). The batch-coupled idempotency terms are evaluated on a
// small second tape whose leaves are the per-sample pooled features; its leaf gradients
// then seed the per-sample backward sweeps. Reduction over samples always runs in index
// order, so threaded and serial evaluation give identical numbers.

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <thread>
#include <vector>

#include "igm/adapter.hpp"
#include "igm/autodiff.hpp"
#include "igm/diffusion.hpp"
#include "igm/error.hpp"
#include "igm/net.hpp"
#include "igm/rng.hpp"
#include "igm/skeleton.hpp"

namespace igm {

enum class ProfileMode { batch, token };

struct LossWeights {
  double gen = 1.0;
  double feat = 0.1;
  double dist = 0.1;
  double tau = 0.1;
  ProfileMode profile = ProfileMode::batch;

  bool needs_idempotency() const { return feat != 0.0 || dist != 0.0; }
  void validate() const {
    if (gen < 0 || feat < 0 || dist < 0) throw ConfigError("loss weights must be >= 0");
    if (tau <= 0) throw ConfigError("similarity temperature must be > 0");
  }
};

// ---------------------------------------------------------------------------
// Plain-value forms.

/// ||a - b||^2; for unit vectors this is 2 - 2 a.b.
template <typename Vec>
double idempotent_loss(const Vec& a, const Vec& b) {
  return double((a - b).squaredNorm());
}

/// z^T Z_ref: similarity of z (length d) to every column of Z_ref (d x m).
inline Eigen::RowVectorXd similarity_profile(const Eigen::VectorXd& z, const Eigen::MatrixXd& z_ref) {
  if (z.size() != z_ref.rows()) throw ConfigError("profile dimension mismatch");
  return z.transpose() * z_ref;
}

// ---------------------------------------------------------------------------
// Batch-level tape forms over pooled feature rows (m x d each).

/// mean_i -target_i . branch_i
template <typename S>
ad::Var<S> feature_idempotency_loss(ad::Var<S> target, ad::Var<S> branch) {
  auto per_sample = ad::sum(ad::mul(target, branch));
  return ad::scale(per_sample, S(-1.0 / double(target.rows())));
}

/// Row-averaged KL(softmax(P(x)/tau) || softmax(P(x0)/tau)) where row i of P(x) holds
/// target_i . target_j and row i of P(x0) holds branch_i . target_j, for j != i.
template <typename S>
ad::Var<S> distribution_idempotency_loss(ad::Var<S> target, ad::Var<S> branch, double tau) {
  const auto m = target.rows();
  if (m < 2) throw ConfigError("distribution idempotency needs a batch of at least 2");
  const S inv_tau = S(1.0 / tau);
  auto logp = ad::log_softmax_rows(ad::scale(ad::drop_diagonal(ad::matmul_nt(target, target)), inv_tau));
  auto logq = ad::log_softmax_rows(ad::scale(ad::drop_diagonal(ad::matmul_nt(branch, target)), inv_tau));
  auto kl = ad::sum(ad::mul(ad::exp(logp), ad::sub(logp, logq)));
  return ad::scale(kl, S(1.0 / double(m)));
}

/// KL between softmaxed profile rows (1 x n each), used by the token-level mode.
template <typename S>
ad::Var<S> profile_kl(ad::Var<S> p_logits, ad::Var<S> q_logits, double tau) {
  const S inv_tau = S(1.0 / tau);
  auto logp = ad::log_softmax_rows(ad::scale(p_logits, inv_tau));
  auto logq = ad::log_softmax_rows(ad::scale(q_logits, inv_tau));
  return ad::sum(ad::mul(ad::exp(logp), ad::sub(logp, logq)));
}

// ---------------------------------------------------------------------------
// Per-sample randomness.

/// All random draws for one sample in one step: augmented condition input, diffusion step
/// and noise, feature-noising step and noise.
template <typename S>
struct TrainingSample {
  ad::Mat<S> clean;
  ad::Mat<S> augmented;
  int t = 1;
  ad::Mat<S> eps;
  int t_prime = 1;
  ad::Mat<S> feature_eps;
};

/// `normalized` is already in model units. The same rng state always yields the same draw.
template <typename S>
TrainingSample<S> draw_training_sample(const SkeletonSequence& normalized, const AugmentationSpec& aug,
                                       const ModelConfig& cfg, Rng& rng) {
  TrainingSample<S> s;
  s.clean = sequence_matrix<S>(normalized);
  s.augmented = sequence_matrix<S>(augment(normalized, aug, rng));
  s.t = uniform_int(rng, 1, cfg.diffusion_steps);
  s.eps = gaussian_matrix<S>(cfg.frames, cfg.row_width(), rng);
  s.t_prime = uniform_int(rng, 1, cfg.diffusion_steps);
  s.feature_eps = gaussian_matrix<S>(1, cfg.net.dim, rng);
  return s;
}

// ---------------------------------------------------------------------------

template <typename S>
struct LossReport {
  double gen = 0, feat = 0, dist = 0, total = 0;
  bool idempotency_evaluated = false;
  std::vector<double> feat_per_sample;
  ad::Grads<S> grads;
};

namespace detail {

template <typename S>
struct SampleGraph {
  std::unique_ptr<ad::Tape<S>> tape = std::make_unique<ad::Tape<S>>();
  ad::Var<S> gen;
  ad::Var<S> target;
  ad::Var<S> branch;
  std::optional<ad::Var<S>> token_dist;
};

template <typename S>
SampleGraph<S> build_sample(const ad::ParamStore<S>& p, const ModelConfig& cfg, const NoiseSchedule& sched,
                            const LossWeights& w, const TrainingSample<S>& s) {
  SampleGraph<S> g;
  ad::Tape<S>& tape = *g.tape;
  auto cond_enc = encode(tape, p, cfg, tape.constant(s.augmented));
  auto cond = condition_vector(cond_enc.tokens, cfg.adapter);
  const double ab = sched.alpha_bar.at(s.t);
  auto x_t = tape.constant(q_sample(s.clean, ab, s.eps));
  auto eps_hat = predict_noise(tape, p, cfg, x_t, cond, s.t);
  auto diff = ad::sub(eps_hat, tape.constant(s.eps));
  g.gen = ad::sum(ad::mul(diff, diff));
  if (!w.needs_idempotency()) return g;

  auto x0 = estimate_x0(x_t, eps_hat, ab);
  const double ab_p = sched.alpha_bar.at(s.t_prime);
  auto z_noised = ad::add(ad::scale(cond_enc.pooled, S(std::sqrt(ab_p))),
                          tape.constant(ad::Mat<S>(s.feature_eps * S(std::sqrt(1.0 - ab_p)))));
  EncoderAux<S> aux{z_noised, s.t, s.t_prime};
  auto branch = encode(tape, p, cfg, x0, &aux);
  auto target = encode(tape, p, cfg, tape.constant(s.clean));
  g.branch = branch.pooled;
  g.target = target.pooled;
  if (w.profile == ProfileMode::token) {
    auto p_x = ad::matmul_nt(target.pooled, ad::l2_normalize_rows(target.tokens));
    auto p_x0 = ad::matmul_nt(branch.pooled, ad::l2_normalize_rows(branch.tokens));
    g.token_dist = profile_kl(p_x, p_x0, w.tau);
  }
  return g;
}

template <typename Fn>
void parallel_for(int n, int threads, Fn&& fn) {
  threads = std::clamp(threads, 1, std::max(1, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (int w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// w_gen L_gen + w_feat L_feat + w_dist L_dist over a batch, with parameter gradients of
/// the weighted total when `with_grads` is set.
template <typename S>
LossReport<S> total_loss(const ad::ParamStore<S>& p, const ModelConfig& cfg, const NoiseSchedule& sched,
                         const LossWeights& w, const std::vector<TrainingSample<S>>& batch, bool with_grads = true,
                         int threads = 1) {
  w.validate();
  const int m = int(batch.size());
  if (m < 1) throw ConfigError("empty batch");
  std::vector<detail::SampleGraph<S>> graphs(m);
  detail::parallel_for(m, threads, [&](int i) { graphs[i] = detail::build_sample(p, cfg, sched, w, batch[i]); });

  LossReport<S> r;
  for (auto& g : graphs) r.gen += double(g.gen.scalar());
  r.gen /= m;

  std::vector<ad::Mat<S>> seed_target(m), seed_branch(m);
  if (w.needs_idempotency()) {
    r.idempotency_evaluated = true;
    ad::Tape<S> bt;
    std::vector<ad::Var<S>> tv, bv;
    for (auto& g : graphs) {
      tv.push_back(bt.variable(g.target.value()));
      bv.push_back(bt.variable(g.branch.value()));
    }
    auto targets = ad::concat_rows(tv);
    auto branches = ad::concat_rows(bv);
    auto feat = feature_idempotency_loss(targets, branches);
    r.feat = double(feat.scalar());
    for (int i = 0; i < m; ++i)
      r.feat_per_sample.push_back(-double(targets.value().row(i).dot(branches.value().row(i))));
    ad::Var<S> objective = ad::scale(feat, S(w.feat));
    if (w.profile == ProfileMode::batch) {
      if (m >= 2) {
        auto dist = distribution_idempotency_loss(targets, branches, w.tau);
        r.dist = double(dist.scalar());
        objective = ad::add(objective, ad::scale(dist, S(w.dist)));
      } else if (w.dist != 0.0) {
        throw ConfigError("distribution idempotency needs a batch of at least 2");
      }
    } else {
      for (auto& g : graphs) r.dist += double(g.token_dist->scalar());
      r.dist /= m;
    }
    if (with_grads) {
      bt.backward(objective);
      for (int i = 0; i < m; ++i) {
        seed_target[i] = bt.has_grad(tv[i].id) ? bt.grad(tv[i].id) : ad::Mat<S>::Zero(1, cfg.net.dim);
        seed_branch[i] = bt.has_grad(bv[i].id) ? bt.grad(bv[i].id) : ad::Mat<S>::Zero(1, cfg.net.dim);
      }
    }
  }
  r.total = w.gen * r.gen + w.feat * r.feat + w.dist * r.dist;
  if (!std::isfinite(r.total)) throw NumericError("non-finite loss");
  if (!with_grads) return r;

  std::vector<ad::Grads<S>> per_sample(m);
  detail::parallel_for(m, threads, [&](int i) {
    auto& g = graphs[i];
    ad::Tape<S>& tape = *g.tape;
    tape.seed(g.gen, ad::Mat<S>::Constant(1, 1, S(w.gen / m)));
    if (w.needs_idempotency()) {
      tape.seed(g.target, seed_target[i]);
      tape.seed(g.branch, seed_branch[i]);
      if (g.token_dist) tape.seed(*g.token_dist, ad::Mat<S>::Constant(1, 1, S(w.dist / m)));
    }
    tape.backward();
    per_sample[i] = p.zeros_like();
    tape.collect(per_sample[i]);
    g.tape.reset();
  });
  r.grads = p.zeros_like();
  for (int i = 0; i < m; ++i)
    for (std::size_t k = 0; k < r.grads.size(); ++k) r.grads[k] += per_sample[i][k];
  return r;
}

}  // namespace igm
