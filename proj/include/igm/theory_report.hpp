#pragma once

// The three theory-check suites behind `igm theory-check`, each returning a JSON report with
// every intermediate quantity and an overall "pass" flag.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "igm/eval.hpp"
#include "igm/theory.hpp"

namespace igm::theory {

using nlohmann::json;

inline json coding_suite(std::uint64_t seed = 0) {
  json r;
  bool pass = true;

  // Orthonormal m = d = 2, eps = 1.
  {
    const double value = coding_length_exact(MatrixXd::Identity(2, 2), 1.0);
    const double expected = 4.0 * std::log(2.0);
    const bool ok = std::abs(value - expected) < 1e-10;
    r["orthonormal"] = {{"value", value}, {"expected", expected}, {"pass", ok}};
    pass &= ok;
  }
  // Degenerate Z = 0.
  {
    const double value = coding_length_exact(MatrixXd::Zero(3, 4), 0.5, false);
    r["zero"] = {{"value", value}, {"pass", value == 0.0}};
    pass &= value == 0.0;
  }
  // Duplicated column: eigenvalue route vs determinant route.
  {
    Rng rng = make_rng(seed, {1});
    MatrixXd z(3, 2);
    z.col(0) = random_unit_columns(3, 1, rng);
    z.col(1) = z.col(0);
    const double a = coding_length_exact(z, 0.7), b = coding_length_determinant(z, 0.7);
    r["duplicate"] = {{"eigen", a}, {"determinant", b}, {"pass", std::abs(a - b) < 1e-12}};
    pass &= std::abs(a - b) < 1e-12;
  }
  // Taylor partial sums with spectral radius 0.5.
  {
    Rng rng = make_rng(seed, {2});
    const int d = 4, m = 6, n_max = 6;
    const MatrixXd z = random_unit_columns(d, m, rng);
    const double rho = gram_eigenvalues(z).maxCoeff();
    const double eps = std::sqrt(double(d) * rho / (double(m) * 0.5));
    const auto tx = coding_length_taylor(z, eps, 40);
    const auto t6 = coding_length_taylor(z, eps, n_max);
    const auto cp = coding_params(d, m, eps);
    const double bound = taylor_tail_bound(cp.mu, m, t6.spectral_radius, n_max);
    const double first = t6.partial_sums.front();
    bool alternating = true;
    for (std::size_t n = 0; n + 1 < tx.partial_sums.size(); ++n) {
      const double e0 = tx.partial_sums[n] - tx.exact, e1 = tx.partial_sums[n + 1] - tx.exact;
      if (std::abs(e0) > 1e-12 && std::abs(e1) > 1e-12 && e0 * e1 > 0) alternating = false;
    }
    const bool ok_bound = std::abs(t6.residual) <= bound;
    const bool ok_first = std::abs(first - m * cp.mu * cp.lambda) < 1e-9;
    r["taylor"] = {{"eps", eps},
                   {"spectral_radius", t6.spectral_radius},
                   {"n_max", n_max},
                   {"exact", t6.exact},
                   {"partial", t6.partial},
                   {"residual", t6.residual},
                   {"bound", bound},
                   {"first_term", first},
                   {"first_term_expected", m * cp.mu * cp.lambda},
                   {"partial_sums", tx.partial_sums},
                   {"alternating", alternating},
                   {"pass", ok_bound && ok_first && alternating}};
    pass &= ok_bound && ok_first && alternating;
  }
  r["pass"] = pass;
  return r;
}

struct EquivalenceInstance {
  std::string name;
  MatrixXd joint;
};

/// Identity joints, random symmetric joints and block joints with m <= 8.
inline std::vector<EquivalenceInstance> equivalence_instances(std::uint64_t seed) {
  std::vector<EquivalenceInstance> out;
  for (int m = 1; m <= 8; ++m) out.push_back({"identity_m" + std::to_string(m), MatrixXd::Identity(m, m) / m});
  Rng rng = make_rng(seed, {3});
  for (int m = 2; m <= 8; ++m) out.push_back({"random_m" + std::to_string(m), random_symmetric_joint(m, rng)});
  out.push_back({"blocks_2_2", block_joint({2, 2})});
  out.push_back({"blocks_3_5", block_joint({3, 5})});
  out.push_back({"blocks_2_3_3", block_joint({2, 3, 3})});
  return out;
}

inline json equivalence_suite(std::uint64_t seed = 0, int trials = 20, double eps = 0.5) {
  json r;
  bool pass = true;
  double worst = 0;
  json rows = json::array();
  Rng rng = make_rng(seed, {4});
  for (const auto& inst : equivalence_instances(seed)) {
    const auto g = AffinityGraph::from_joint(inst.joint);
    for (int d = 1; d <= 4; ++d) {
      const auto rep = equivalence_check(g, d, trials, eps, rng);
      worst = std::max(worst, rep.constant_variance);
      const double top = g.eigenvalues_desc()[0];
      const bool ok = rep.constant_across_trials && top <= 1.0 + 1e-9 &&
                      std::abs(rep.constant_mean - rep.closed_form_constant) < 1e-8;
      pass &= ok;
      rows.push_back({{"instance", inst.name},
                      {"m", g.size()},
                      {"d", d},
                      {"trials", trials},
                      {"constant_mean", rep.constant_mean},
                      {"constant_variance", rep.constant_variance},
                      {"difference_variance", rep.difference_variance},
                      {"closed_form_constant", rep.closed_form_constant},
                      {"top_eigenvalue", top},
                      {"pass", ok}});
    }
  }
  r["instances"] = rows;
  r["max_constant_variance"] = worst;

  // Two disconnected classes: the rank-2 minimizer has no cross-block similarity.
  {
    const auto g = AffinityGraph::from_joint(block_joint({3, 4}));
    Rng frng = make_rng(seed, {5});
    const MatrixXd f = minimize_spectral_objective(g.adjacency, 2, frng);
    const MatrixXd sim = f.transpose() * f;
    const double off = std::max(sim.topRightCorner(3, 4).cwiseAbs().maxCoeff(),
                                sim.bottomLeftCorner(4, 3).cwiseAbs().maxCoeff());
    const double gd = spectral_objective(f, g.adjacency);
    const double eig = spectral_objective(spectral_factor(g.adjacency, 2), g.adjacency);
    const bool ok = off < 1e-6 && std::abs(gd - eig) < 1e-8;
    r["block_minimizer"] = {{"max_off_block", off}, {"objective_gd", gd}, {"objective_eig", eig}, {"pass", ok}};
    pass &= ok;
  }
  r["eps"] = eps;
  r["pass"] = pass;
  return r;
}

/// Probe error of the rank-d spectral embedding: nodes alternate between probe-train and
/// probe-test.
inline double spectral_probe_error(const ClusterGraph& cg, int d, int num_classes, std::uint64_t seed) {
  const auto g = AffinityGraph::from_joint(cg.joint);
  const MatrixXd emb = spectral_embedding(g, d);
  std::vector<int> tr, te;
  for (int i = 0; i < int(cg.labels.size()); ++i) (i % 2 ? te : tr).push_back(i);
  MatrixXd xtr(tr.size(), emb.cols()), xte(te.size(), emb.cols());
  std::vector<int> ytr, yte;
  for (std::size_t i = 0; i < tr.size(); ++i) {
    xtr.row(i) = emb.row(tr[i]);
    ytr.push_back(cg.labels[tr[i]]);
  }
  for (std::size_t i = 0; i < te.size(); ++i) {
    xte.row(i) = emb.row(te[i]);
    yte.push_back(cg.labels[te[i]]);
  }
  ProbeOptions po;
  po.seed = seed;
  return 1.0 - linear_probe(xtr, ytr, xte, yte, num_classes, po);
}

inline json bound_suite(std::uint64_t seed = 0, int seeds = 5) {
  json r;
  bool pass = true;
  const int k = 3, per = 20, d = k;

  // Perfectly clustered: uniform joint within each cluster.
  {
    ClusterGraph cg;
    cg.joint = block_joint({per, per, per});
    for (int i = 0; i < k * per; ++i) cg.labels.push_back(i / per);
    const auto g = AffinityGraph::from_joint(cg.joint);
    const double mass = residual_eigen_mass(g.eigenvalues_desc(), d);
    const double pe = spectral_probe_error(cg, d, k, seed);
    const bool ok = mass < 1e-10 && pe < 1e-12;
    r["perfect"] = {{"residual_mass", mass}, {"alpha", 0.0}, {"probe_error", pe}, {"pass", ok}};
    pass &= ok;
  }
  // d = m: empty residual sum.
  {
    Rng rng = make_rng(seed, {6});
    const auto cg = make_cluster_graph(2, 4, 0.2, 3, rng);
    const auto g = AffinityGraph::from_joint(cg.joint);
    BoundInstance inst{g.eigenvalues_desc(), int(g.size()), cg.alpha};
    const auto rep = bound_diagnostic({{inst, 0.0}});
    const bool ok = rep.rows[0].degenerate && rep.rows[0].residual_mass == 0.0;
    r["full_rank"] = {{"residual_mass", rep.rows[0].residual_mass}, {"alpha", cg.alpha}, {"pass", ok}};
    pass &= ok;
  }
  // One graph family point: means over `seeds` random draws.
  auto family_point = [&](double leak, int deg, std::uint64_t tag) {
    double mass = 0, alpha = 0, pe = 0;
    VectorXd mean_eig;
    for (int s = 0; s < seeds; ++s) {
      Rng rng = make_rng(seed, {tag, std::uint64_t(s), std::uint64_t(leak * 1000), std::uint64_t(deg)});
      const auto cg = make_cluster_graph(k, per, leak, deg, rng);
      const auto g = AffinityGraph::from_joint(cg.joint);
      const VectorXd eig = g.eigenvalues_desc();
      mass += residual_eigen_mass(eig, d) / seeds;
      alpha += cg.alpha / seeds;
      pe += spectral_probe_error(cg, d, k, seed + s) / seeds;
      mean_eig = s == 0 ? eig : VectorXd(mean_eig + eig);
    }
    return std::pair{BoundInstance{VectorXd(mean_eig / seeds), d, alpha}, pe};
  };
  auto report_rows = [](const BoundReport& rep) {
    json rows = json::array();
    for (const auto& row : rep.rows)
      rows.push_back({{"residual_mass", row.residual_mass}, {"alpha", row.alpha}, {"probe_error", row.probe_error}});
    return rows;
  };

  // Same leakage (so the same expected alpha), sparser in-cluster edges: residual mass grows.
  {
    std::vector<std::pair<BoundInstance, double>> family;
    json degrees = json::array();
    for (int deg : {24, 6, 2}) {
      family.push_back(family_point(0.35, deg, 7));
      degrees.push_back(deg);
    }
    const auto rep = bound_diagnostic(family);
    r["density_family"] = {{"leak", 0.35},
                           {"degrees", degrees},
                           {"by_residual_mass", report_rows(rep)},
                           {"seeds", seeds},
                           {"monotone", rep.monotone},
                           {"pass", rep.monotone}};
    pass &= rep.monotone;
  }
  // Increasing inter-class leakage at fixed density.
  {
    json rows = json::array();
    bool monotone = true;
    double prev = -1;
    for (double leak : {0.05, 0.3, 0.55}) {
      const auto [inst, pe] = family_point(leak, 24, 8);
      rows.push_back({{"leak", leak},
                      {"residual_mass", residual_eigen_mass(inst.eigenvalues, d)},
                      {"alpha", inst.alpha},
                      {"probe_error", pe}});
      monotone &= pe >= prev;
      prev = pe;
    }
    r["leak_family"] = {{"graphs", rows}, {"seeds", seeds}, {"monotone", monotone}, {"pass", monotone}};
    pass &= monotone;
  }
  r["pass"] = pass;
  return r;
}

inline json run_suite(const std::string& name, std::uint64_t seed = 0) {
  if (name == "coding") return coding_suite(seed);
  if (name == "equivalence") return equivalence_suite(seed);
  if (name == "bound") return bound_suite(seed);
  throw ConfigError("unknown theory suite '" + name + "' (expected coding, equivalence or bound)");
}

}  // namespace igm::theory
