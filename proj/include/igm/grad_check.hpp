#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include "igm/autodiff.hpp"
#include "igm/error.hpp"
#include "igm/rng.hpp"

namespace igm {

struct GradCheckResult {
  double max_rel_err = 0.0;
  int coordinates = 0;
  int worst_param = -1;
  double worst_analytic = 0.0, worst_numeric = 0.0;
};

struct GradCheckOptions {
  double eps = 1e-4;
  int coordinates = 200;  // at least this many, or every coordinate if fewer exist
  std::uint64_t seed = 0;
  // Relative error denominator is max(|analytic|, |numeric|, floor * max(1, |loss|)).
  double floor = 1e-6;
};

/// Central finite differences against the analytic gradient on a random subsample of
/// parameter coordinates. `loss_fn(params)` returns (loss, grads aligned with params).
template <typename LossFn>
GradCheckResult grad_check(LossFn&& loss_fn, ad::ParamStore<double> params, const GradCheckOptions& opt = {}) {
  auto [loss, grads] = loss_fn(params);
  if (!std::isfinite(loss)) throw NumericError("grad_check: non-finite loss");

  std::vector<std::pair<int, Eigen::Index>> coords;
  for (int k = 0; k < params.size(); ++k)
    for (Eigen::Index i = 0; i < params.value(k).size(); ++i) coords.push_back({k, i});
  Rng rng = make_rng(opt.seed, {0x9c4ULL});
  std::shuffle(coords.begin(), coords.end(), rng);
  if (int(coords.size()) > opt.coordinates) coords.resize(opt.coordinates);

  GradCheckResult r;
  const double floor = opt.floor * std::max(1.0, std::abs(loss));
  for (auto [k, i] : coords) {
    double& x = params.value(k).data()[i];
    const double saved = x;
    x = saved + opt.eps;
    const double up = loss_fn(params).first;
    x = saved - opt.eps;
    const double down = loss_fn(params).first;
    x = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("grad_check: non-finite loss");
    const double numeric = (up - down) / (2.0 * opt.eps);
    const double analytic = grads[k].data()[i];
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
    if (rel > r.max_rel_err || r.worst_param < 0) {
      r.max_rel_err = std::max(r.max_rel_err, rel);
      r.worst_param = k;
      r.worst_analytic = analytic;
      r.worst_numeric = numeric;
    }
    ++r.coordinates;
  }
  return r;
}

}  // namespace igm
