#pragma once

// Numerical checks of the coding-length entropy surrogate and of the equivalence between the
// idempotent objective and spectral contrastive learning, on small enumerable instances.
//
// Conventions: Z is d x m with unit-norm columns, mu = (m + d) / 2, lambda = d / (m eps^2),
// G = Z^T Z. Natural logarithms throughout.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "igm/error.hpp"
#include "igm/rng.hpp"

namespace igm::theory {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct CodingParams {
  double mu = 0, lambda = 0;
};

inline CodingParams coding_params(Eigen::Index d, Eigen::Index m, double eps) {
  if (!(eps > 0)) throw ConfigError("distortion eps must be > 0");
  return {double(m + d) / 2.0, double(d) / (double(m) * eps * eps)};
}

inline void require_unit_columns(const MatrixXd& z, double tol = 1e-8) {
  for (Eigen::Index j = 0; j < z.cols(); ++j)
    if (std::abs(z.col(j).norm() - 1.0) > tol)
      throw NumericError("column " + std::to_string(j) + " of Z is not unit-norm (norm " +
                         std::to_string(z.col(j).norm()) + ")");
}

/// Columns rescaled to unit norm.
inline MatrixXd normalize_columns(MatrixXd z) {
  for (Eigen::Index j = 0; j < z.cols(); ++j) z.col(j).normalize();
  return z;
}

inline MatrixXd random_unit_columns(int d, int m, Rng& rng) {
  MatrixXd z(d, m);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = gaussian(rng);
  return normalize_columns(z);
}

/// Eigenvalues of the symmetric Gram matrix Z^T Z, ascending.
inline VectorXd gram_eigenvalues(const MatrixXd& z) {
  const MatrixXd g = z.transpose() * z;
  return Eigen::SelfAdjointEigenSolver<MatrixXd>(g, Eigen::EigenvaluesOnly).eigenvalues();
}

/// L = mu log det(I + lambda Z^T Z), evaluated through the eigenvalues of Z^T Z.
inline double coding_length_exact(const MatrixXd& z, double eps, bool require_unit = true) {
  if (require_unit) require_unit_columns(z);
  const auto cp = coding_params(z.rows(), z.cols(), eps);
  const VectorXd ev = gram_eigenvalues(z);
  double s = 0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) s += std::log1p(cp.lambda * std::max(0.0, ev[i]));
  return cp.mu * s;
}

/// Same quantity through an LU determinant, kept separate from the eigenvalue route.
inline double coding_length_determinant(const MatrixXd& z, double eps) {
  const auto cp = coding_params(z.rows(), z.cols(), eps);
  const MatrixXd m = MatrixXd::Identity(z.cols(), z.cols()) + cp.lambda * z.transpose() * z;
  return cp.mu * std::log(m.determinant());
}

struct TaylorExpansion {
  double partial = 0;          // mu sum_{n=1}^{n_max} (-1)^{n-1}/n Tr((lambda G)^n)
  double exact = 0;
  double residual = 0;         // exact - partial
  double spectral_radius = 0;  // of lambda G
  std::vector<double> partial_sums;  // after each order 1..n_max
};

/// Partial Taylor sums of the log-det, from repeated matrix powers of lambda G.
inline TaylorExpansion coding_length_taylor(const MatrixXd& z, double eps, int n_max) {
  require_unit_columns(z);
  if (n_max < 1) throw ConfigError("Taylor order must be >= 1");
  const auto cp = coding_params(z.rows(), z.cols(), eps);
  const MatrixXd lg = cp.lambda * (z.transpose() * z);
  TaylorExpansion r;
  r.spectral_radius = std::max(0.0, gram_eigenvalues(z).maxCoeff()) * cp.lambda;
  if (r.spectral_radius >= 1.0)
    throw NumericError("Taylor series diverges: spectral radius of lambda Z^T Z is " +
                       std::to_string(r.spectral_radius) + " (must be < 1)");
  MatrixXd power = lg;
  double sum = 0;
  for (int n = 1; n <= n_max; ++n) {
    if (n > 1) power = power * lg;
    sum += ((n % 2 == 1) ? 1.0 : -1.0) / n * power.trace();
    r.partial_sums.push_back(cp.mu * sum);
  }
  r.partial = cp.mu * sum;
  r.exact = coding_length_exact(z, eps);
  r.residual = r.exact - r.partial;
  return r;
}

/// Geometric bound on the tail after order n_max: every eigenvalue r_i <= r < 1 of lambda G
/// contributes at most r_i^{n+1} / ((n+1)(1 - r_i)), and there are m of them.
inline double taylor_tail_bound(double mu, Eigen::Index m, double radius, int n_max) {
  if (radius >= 1.0) throw NumericError("tail bound needs spectral radius < 1");
  return mu * double(m) * std::pow(radius, n_max + 1) / ((n_max + 1) * (1.0 - radius));
}

/// sum_ij (z_i^T z_j)^2 = Tr((Z^T Z)^2).
inline double pairwise_similarity_energy(const MatrixXd& z) {
  return (z.transpose() * z).squaredNorm();
}

/// Order >= 3 tail of the coding length expansion:
/// R = sum_{n>=3} (-1)^n mu lambda^n / n Tr(G^n) = mu lambda Tr(G) - mu lambda^2 / 2 Tr(G^2) - L.
inline double residual_R(const MatrixXd& z, double eps) {
  const auto cp = coding_params(z.rows(), z.cols(), eps);
  const MatrixXd g = z.transpose() * z;
  return cp.mu * cp.lambda * g.trace() - 0.5 * cp.mu * cp.lambda * cp.lambda * g.squaredNorm() -
         coding_length_exact(z, eps, false);
}

/// The same tail by direct summation of n_terms series terms (needs radius < 1).
inline double residual_R_series(const MatrixXd& z, double eps, int n_terms) {
  const auto cp = coding_params(z.rows(), z.cols(), eps);
  const MatrixXd g = z.transpose() * z;
  MatrixXd power = g * g;
  double lam_n = cp.lambda * cp.lambda, sum = 0;
  for (int n = 3; n < 3 + n_terms; ++n) {
    power = power * g;
    lam_n *= cp.lambda;
    sum += ((n % 2 == 0) ? 1.0 : -1.0) * lam_n / n * power.trace();
  }
  return cp.mu * sum;
}

/// ||A - F^T F||_F^2.
inline double spectral_objective(const MatrixXd& f, const MatrixXd& a) {
  if (a.rows() != f.cols() || a.cols() != f.cols()) throw ConfigError("A must be m x m for F d x m");
  return (a - f.transpose() * f).squaredNorm();
}

// ---------------------------------------------------------------------------
// Affinity graphs.

/// Joint p(x, x_hat) over a finite space, its marginal, the normalized adjacency
/// A = p(x, x_hat) / sqrt(p(x) p(x_hat)) and the Laplacian I - A.
struct AffinityGraph {
  MatrixXd joint;
  VectorXd marginal;
  MatrixXd adjacency;
  MatrixXd laplacian;

  Eigen::Index size() const { return joint.rows(); }

  static AffinityGraph from_joint(const MatrixXd& joint, double tol = 1e-9) {
    if (joint.rows() != joint.cols() || joint.rows() < 1) throw ConfigError("joint must be square and non-empty");
    if ((joint.array() < 0).any()) throw NumericError("joint has negative entries");
    if (std::abs(joint.sum() - 1.0) > tol)
      throw NumericError("joint is not normalized (sums to " + std::to_string(joint.sum()) + ")");
    AffinityGraph g;
    g.joint = joint;
    g.marginal = joint.rowwise().sum();
    if ((g.marginal.array() <= 0).any()) throw NumericError("joint has a zero-probability point");
    const VectorXd inv_sqrt = g.marginal.array().rsqrt();
    g.adjacency = inv_sqrt.asDiagonal() * joint * inv_sqrt.asDiagonal();
    g.laplacian = MatrixXd::Identity(joint.rows(), joint.cols()) - g.adjacency;
    return g;
  }

  /// Eigenvalues of the (symmetrized) adjacency, sorted descending.
  VectorXd eigenvalues_desc() const {
    const MatrixXd sym = 0.5 * (adjacency + adjacency.transpose());
    VectorXd ev = Eigen::SelfAdjointEigenSolver<MatrixXd>(sym, Eigen::EigenvaluesOnly).eigenvalues();
    std::sort(ev.data(), ev.data() + ev.size(), std::greater<>());
    return ev;
  }
};

/// Symmetric random joint: uniform weights on a random symmetric support plus the diagonal.
inline MatrixXd random_symmetric_joint(int m, Rng& rng) {
  MatrixXd w(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = i; j < m; ++j) w(i, j) = w(j, i) = (i == j ? 1.0 : 0.0) + uniform(rng, 0.0, 1.0);
  return w / w.sum();
}

/// Uniform joint within each block of a partition, zero across blocks.
inline MatrixXd block_joint(const std::vector<int>& block_sizes) {
  const int m = std::accumulate(block_sizes.begin(), block_sizes.end(), 0);
  MatrixXd w = MatrixXd::Zero(m, m);
  int at = 0;
  for (int n : block_sizes) {
    w.block(at, at, n, n).setOnes();
    at += n;
  }
  return w / w.sum();
}

// ---------------------------------------------------------------------------
// Equivalence between the idempotent objective and the spectral contrastive loss.

struct EquivalenceTrial {
  double expected_alignment = 0;  // E_{(x, x_hat)}[-2 f(x_hat)^T f(x)]
  double similarity_energy = 0;   // Tr((F^T F)^2)
  double residual = 0;            // R for the unit features Z
  double spectral = 0;            // ||A - F^T F||_F^2
  double difference = 0;          // (alignment + energy + R) - spectral, i.e. R + C
  double constant = 0;            // difference - R, i.e. C
};

struct EquivalenceReport {
  std::vector<EquivalenceTrial> trials;
  double constant_mean = 0, constant_variance = 0;
  double difference_variance = 0;
  double closed_form_constant = 0;  // -||A||_F^2
  bool constant_across_trials = false;
};

/// f(x) are the columns of Z; F = Z diag(sqrt(p(x))).
inline EquivalenceTrial equivalence_trial(const AffinityGraph& g, const MatrixXd& z, double eps) {
  if (z.cols() != g.size()) throw ConfigError("Z must have one column per sample-space point");
  const VectorXd sqrt_p = g.marginal.array().sqrt();
  const MatrixXd f = z * sqrt_p.asDiagonal();
  EquivalenceTrial t;
  double align = 0;
  for (Eigen::Index x = 0; x < g.size(); ++x)
    for (Eigen::Index xh = 0; xh < g.size(); ++xh) align += g.joint(x, xh) * z.col(xh).dot(z.col(x));
  t.expected_alignment = -2.0 * align;
  t.similarity_energy = (f.transpose() * f).squaredNorm();
  t.residual = residual_R(z, eps);
  t.spectral = spectral_objective(f, g.adjacency);
  t.difference = t.expected_alignment + t.similarity_energy + t.residual - t.spectral;
  t.constant = t.difference - t.residual;
  return t;
}

inline EquivalenceReport equivalence_check(const AffinityGraph& g, int d, int trials, double eps, Rng& rng,
                                           double tol = 1e-8) {
  if (trials < 1) throw ConfigError("need at least one trial");
  EquivalenceReport r;
  for (int i = 0; i < trials; ++i) r.trials.push_back(equivalence_trial(g, random_unit_columns(d, int(g.size()), rng), eps));
  auto variance = [&](auto field) {
    double mean = 0, var = 0;
    for (const auto& t : r.trials) mean += t.*field;
    mean /= trials;
    for (const auto& t : r.trials) var += (t.*field - mean) * (t.*field - mean);
    return std::pair{mean, var / trials};
  };
  std::tie(r.constant_mean, r.constant_variance) = variance(&EquivalenceTrial::constant);
  r.difference_variance = variance(&EquivalenceTrial::difference).second;
  r.closed_form_constant = -g.adjacency.squaredNorm();
  r.constant_across_trials = r.constant_variance < tol;
  return r;
}

/// Best rank-d factor of A (Eckart-Young on the PSD part): F = diag(sqrt(l_top)) U_top^T.
inline MatrixXd spectral_factor(const MatrixXd& a, int d) {
  const MatrixXd sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym);
  const Eigen::Index m = a.rows();
  d = std::min<int>(d, int(m));
  MatrixXd f(d, m);
  for (int k = 0; k < d; ++k) {
    const Eigen::Index idx = m - 1 - k;
    f.row(k) = std::sqrt(std::max(0.0, es.eigenvalues()[idx])) * es.eigenvectors().col(idx).transpose();
  }
  return f;
}

/// Gradient descent on ||A - F^T F||_F^2 from a small random start.
inline MatrixXd minimize_spectral_objective(const MatrixXd& a, int d, Rng& rng, int iters = 20000, double lr = 0.05) {
  const Eigen::Index m = a.rows();
  MatrixXd f(d, m);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = gaussian(rng, 0.0, 0.1);
  for (int it = 0; it < iters; ++it) f -= lr * (-4.0 * f * (a - f.transpose() * f));
  return f;
}

// ---------------------------------------------------------------------------
// Residual-eigenvalue diagnostic for the downstream error bound.

/// sum_{i=d+1}^m lambda_i^2 over descending eigenvalues; zero when d >= m.
inline double residual_eigen_mass(const VectorXd& eig_desc, int d) {
  double s = 0;
  for (Eigen::Index i = d; i < eig_desc.size(); ++i) s += eig_desc[i] * eig_desc[i];
  return s;
}

struct BoundInstance {
  VectorXd eigenvalues;  // descending
  int d = 1;
  double alpha = 0;  // P[y_x != y_x_hat] under the joint
};

struct BoundRow {
  double residual_mass = 0;
  double alpha = 0;
  double probe_error = 0;
  bool degenerate = false;
};

struct BoundReport {
  std::vector<BoundRow> rows;  // sorted by residual mass
  bool monotone = false;       // probe error non-decreasing along residual mass
};

inline BoundReport bound_diagnostic(const std::vector<std::pair<BoundInstance, double>>& instances,
                                    double slack = 0.0) {
  BoundReport r;
  for (const auto& [inst, pe] : instances) {
    if (!std::is_sorted(inst.eigenvalues.data(), inst.eigenvalues.data() + inst.eigenvalues.size(), std::greater<>()))
      throw ConfigError("bound instance eigenvalues must be sorted descending");
    BoundRow row;
    row.degenerate = inst.d >= inst.eigenvalues.size();
    row.residual_mass = row.degenerate ? 0.0 : residual_eigen_mass(inst.eigenvalues, inst.d);
    row.alpha = inst.alpha;
    row.probe_error = pe;
    r.rows.push_back(row);
  }
  std::stable_sort(r.rows.begin(), r.rows.end(),
                   [](const BoundRow& a, const BoundRow& b) { return a.residual_mass < b.residual_mass; });
  r.monotone = true;
  for (std::size_t i = 1; i < r.rows.size(); ++i)
    if (r.rows[i].probe_error + slack < r.rows[i - 1].probe_error) r.monotone = false;
  return r;
}

/// K clusters of n points. Each point draws `degree` partners: same cluster with
/// probability 1 - leak, otherwise a uniformly random point of another cluster. The
/// symmetrized, normalized edge counts form the joint.
struct ClusterGraph {
  MatrixXd joint;
  std::vector<int> labels;
  double alpha = 0;
};

inline ClusterGraph make_cluster_graph(int clusters, int per_cluster, double leak, int degree, Rng& rng) {
  const int m = clusters * per_cluster;
  ClusterGraph g;
  g.labels.resize(m);
  for (int i = 0; i < m; ++i) g.labels[i] = i / per_cluster;
  MatrixXd w = MatrixXd::Zero(m, m);
  for (int i = 0; i < m; ++i) {
    w(i, i) += 1.0;
    for (int e = 0; e < degree; ++e) {
      int j;
      if (clusters > 1 && bernoulli(rng, leak)) {
        int other = uniform_int(rng, 0, clusters - 2);
        if (other >= g.labels[i]) ++other;
        j = other * per_cluster + uniform_int(rng, 0, per_cluster - 1);
      } else {
        j = g.labels[i] * per_cluster + uniform_int(rng, 0, per_cluster - 1);
      }
      w(i, j) += 1.0;
      w(j, i) += 1.0;
    }
  }
  g.joint = w / w.sum();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      if (g.labels[i] != g.labels[j]) g.alpha += g.joint(i, j);
  return g;
}

/// Per-point spectral features f(x) = F[:, x] / sqrt(p(x)) from the rank-d factor of A,
/// returned as m x d rows.
inline MatrixXd spectral_embedding(const AffinityGraph& g, int d) {
  const MatrixXd f = spectral_factor(g.adjacency, d);
  MatrixXd rows = f.transpose();
  for (Eigen::Index x = 0; x < rows.rows(); ++x) rows.row(x) /= std::sqrt(g.marginal[x]);
  return rows;
}

}  // namespace igm::theory
