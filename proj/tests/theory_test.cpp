#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "igm/theory_report.hpp"

namespace igm::theory {
namespace {

MatrixXd random_orthogonal(int d, Rng& rng) {
  MatrixXd a(d, d);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = gaussian(rng);
  return Eigen::HouseholderQR<MatrixXd>(a).householderQ();
}

TEST(CodingLength, ZeroMatrixIsZero) { EXPECT_EQ(coding_length_exact(MatrixXd::Zero(3, 5), 0.5, false), 0.0); }

TEST(CodingLength, OrthonormalTwoByTwo) {
  EXPECT_NEAR(coding_length_exact(MatrixXd::Identity(2, 2), 1.0), 4 * std::log(2.0), 1e-12);
}

TEST(CodingLength, DuplicatedColumnMatchesClosedForm) {
  Rng rng = make_rng(1, {});
  MatrixXd z(4, 2);
  z.col(0) = random_unit_columns(4, 1, rng);
  z.col(1) = z.col(0);
  const double eps = 0.8;
  const auto cp = coding_params(4, 2, eps);
  // Eigenvalues of lambda Z^T Z are {2 lambda, 0}.
  const double expected = cp.mu * std::log1p(2 * cp.lambda);
  EXPECT_NEAR(coding_length_exact(z, eps), expected, 1e-12);
  EXPECT_NEAR(coding_length_determinant(z, eps), expected, 1e-12);
}

TEST(CodingLength, EigenAndDeterminantRoutesAgree) {
  Rng rng = make_rng(2, {});
  for (int trial = 0; trial < 20; ++trial) {
    const int d = uniform_int(rng, 1, 6), m = uniform_int(rng, 1, 8);
    const MatrixXd z = random_unit_columns(d, m, rng);
    const double eps = uniform(rng, 0.3, 2.0);
    EXPECT_NEAR(coding_length_exact(z, eps), coding_length_determinant(z, eps), 1e-9);
  }
}

TEST(CodingLength, InvariantUnderPermutationAndRotation) {
  Rng rng = make_rng(3, {});
  for (int trial = 0; trial < 10; ++trial) {
    const MatrixXd z = random_unit_columns(5, 7, rng);
    const double base = coding_length_exact(z, 0.5);
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(7);
    perm.setIdentity();
    std::shuffle(perm.indices().data(), perm.indices().data() + 7, rng);
    EXPECT_NEAR(coding_length_exact(z * perm, 0.5), base, 1e-9);
    EXPECT_NEAR(coding_length_exact(random_orthogonal(5, rng) * z, 0.5), base, 1e-9);
  }
}

TEST(CodingLength, Errors) {
  EXPECT_THROW(coding_length_exact(MatrixXd::Ones(2, 2), 0.5), NumericError);
  EXPECT_THROW(coding_length_exact(MatrixXd::Identity(2, 2), 0.0), ConfigError);
}

// lambda G with spectral radius `radius`.
double eps_for_radius(const MatrixXd& z, double radius) {
  return std::sqrt(double(z.rows()) * gram_eigenvalues(z).maxCoeff() / (double(z.cols()) * radius));
}

TEST(Taylor, ConvergesAndAlternates) {
  Rng rng = make_rng(4, {});
  const MatrixXd z = random_unit_columns(4, 6, rng);
  const auto tx = coding_length_taylor(z, eps_for_radius(z, 0.6), 60);
  double prev = 1e300;
  for (std::size_t n = 0; n < tx.partial_sums.size(); ++n) {
    const double err = tx.partial_sums[n] - tx.exact;
    // Odd orders overshoot, even orders undershoot.
    if (std::abs(err) > 1e-12) {
      EXPECT_EQ(err > 0, n % 2 == 0) << "order " << n + 1;
    }
    EXPECT_LE(std::abs(err), prev + 1e-12);
    prev = std::abs(err);
  }
  EXPECT_LT(std::abs(tx.residual), 1e-10);
}

TEST(Taylor, FirstTermIsDataIndependent) {
  Rng rng = make_rng(5, {});
  const MatrixXd a = random_unit_columns(3, 5, rng), b = random_unit_columns(3, 5, rng);
  const double eps = 3.0;
  const auto cp = coding_params(3, 5, eps);
  EXPECT_NEAR(coding_length_taylor(a, eps, 1).partial, 5 * cp.mu * cp.lambda, 1e-10);
  EXPECT_NEAR(coding_length_taylor(b, eps, 1).partial, 5 * cp.mu * cp.lambda, 1e-10);
}

TEST(Taylor, ResidualWithinGeometricTailBound) {
  Rng rng = make_rng(6, {});
  for (int trial = 0; trial < 30; ++trial) {
    const int d = uniform_int(rng, 2, 5), m = uniform_int(rng, 2, 8);
    const MatrixXd z = random_unit_columns(d, m, rng);
    const double radius = uniform(rng, 0.05, 0.9);
    const double eps = eps_for_radius(z, radius);
    for (int n_max : {2, 3, 5}) {
      const auto tx = coding_length_taylor(z, eps, n_max);
      const auto cp = coding_params(d, m, eps);
      EXPECT_LE(std::abs(tx.residual), taylor_tail_bound(cp.mu, m, tx.spectral_radius, n_max) * (1 + 1e-9));
    }
  }
}

// With m equal eigenvalues the tail exceeds the single-eigenvalue form of the bound.
TEST(Taylor, TailBoundNeedsPerEigenvalueFactor) {
  const MatrixXd z = MatrixXd::Identity(4, 4);
  const double eps = eps_for_radius(z, 0.5);
  const auto tx = coding_length_taylor(z, eps, 2);
  const auto cp = coding_params(4, 4, eps);
  const double r = tx.spectral_radius;
  const double single = cp.mu * std::pow(r, 3) / (3 * (1 - r));
  EXPECT_GT(std::abs(tx.residual), single);
  EXPECT_LE(std::abs(tx.residual), taylor_tail_bound(cp.mu, 4, r, 2));
}

TEST(Taylor, DivergentRadiusNamesTheRadius) {
  const MatrixXd z = MatrixXd::Identity(2, 2);
  try {
    coding_length_taylor(z, 0.5, 3);
    FAIL() << "expected divergence error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("spectral radius"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("4.0"), std::string::npos);
  }
}

TEST(ResidualR, ClosedFormMatchesSeries) {
  Rng rng = make_rng(7, {});
  for (int trial = 0; trial < 10; ++trial) {
    const MatrixXd z = random_unit_columns(3, 6, rng);
    const double eps = eps_for_radius(z, 0.5);
    EXPECT_NEAR(residual_R(z, eps), residual_R_series(z, eps, 200), 1e-10);
  }
}

TEST(SimilarityEnergy, Examples) {
  EXPECT_NEAR(pairwise_similarity_energy(MatrixXd::Identity(5, 3)), 3.0, 1e-14);
  MatrixXd same(3, 4);
  for (int j = 0; j < 4; ++j) same.col(j) = Eigen::Vector3d(0, 0.6, 0.8);
  EXPECT_NEAR(pairwise_similarity_energy(same), 16.0, 1e-12);
  Rng rng = make_rng(8, {});
  const MatrixXd z = random_unit_columns(4, 6, rng);
  double loop = 0;
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) {
      double s = 0;
      for (int k = 0; k < 4; ++k) s += z(k, i) * z(k, j);
      loop += s * s;
    }
  EXPECT_NEAR(pairwise_similarity_energy(z), loop, 1e-12);
}

TEST(SpectralObjective, Examples) {
  Rng rng = make_rng(9, {});
  const MatrixXd f0 = random_unit_columns(2, 5, rng);
  const MatrixXd a = f0.transpose() * f0;
  EXPECT_NEAR(spectral_objective(f0, a), 0.0, 1e-24);
  EXPECT_NEAR(spectral_objective(spectral_factor(a, 2), a), 0.0, 1e-20);
  EXPECT_NEAR(spectral_objective(MatrixXd::Zero(3, 5), a), a.squaredNorm(), 1e-14);
  const MatrixXd f = random_unit_columns(3, 5, rng);
  double loop = 0;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) loop += std::pow(a(i, j) - f.col(i).dot(f.col(j)), 2);
  EXPECT_NEAR(spectral_objective(f, a), loop, 1e-12);
  EXPECT_THROW(spectral_objective(f, MatrixXd::Zero(4, 4)), ConfigError);
}

TEST(AffinityGraph, Construction) {
  Rng rng = make_rng(10, {});
  const auto g = AffinityGraph::from_joint(random_symmetric_joint(6, rng));
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j)
      EXPECT_NEAR(g.adjacency(i, j), g.joint(i, j) / std::sqrt(g.marginal[i] * g.marginal[j]), 1e-14);
  EXPECT_LT((g.adjacency - g.adjacency.transpose()).norm(), 1e-14);
  EXPECT_LE(g.eigenvalues_desc()[0], 1 + 1e-12);
  // sqrt(p) is the top eigenvector with eigenvalue 1.
  const VectorXd s = g.marginal.array().sqrt();
  EXPECT_LT((g.adjacency * s - s).norm(), 1e-12);
  EXPECT_LT((g.laplacian - (MatrixXd::Identity(6, 6) - g.adjacency)).norm(), 1e-15);
}

TEST(AffinityGraph, Errors) {
  EXPECT_THROW(AffinityGraph::from_joint(MatrixXd::Identity(3, 3)), NumericError);
  MatrixXd neg = MatrixXd::Identity(2, 2) / 2;
  neg(0, 1) = -0.1;
  neg(1, 0) = 0.1;
  EXPECT_THROW(AffinityGraph::from_joint(neg), NumericError);
  EXPECT_THROW(AffinityGraph::from_joint(MatrixXd::Zero(2, 3)), ConfigError);
}

// Independent evaluation of the difference with plain loops.
double naive_constant(const AffinityGraph& g, const MatrixXd& z, double eps) {
  const Eigen::Index m = g.size();
  double align = 0, energy = 0, spectral = 0;
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) {
      const double s = z.col(i).dot(z.col(j));
      align += -2 * g.joint(i, j) * s;
      const double ff = std::sqrt(g.marginal[i] * g.marginal[j]) * s;
      energy += ff * ff;
      spectral += std::pow(g.adjacency(i, j) - ff, 2);
    }
  return align + energy - spectral;
}

TEST(Equivalence, IdentityJointConstantAfterResidual) {
  const int m = 5;
  const auto g = AffinityGraph::from_joint(MatrixXd::Identity(m, m) / m);
  Rng rng = make_rng(11, {});
  const auto rep = equivalence_check(g, 3, 25, 0.5, rng);
  EXPECT_LT(rep.constant_variance, 1e-8);
  // A = I, so the constant is -||I||_F^2 = -m.
  EXPECT_NEAR(rep.constant_mean, -double(m), 1e-10);
  EXPECT_NEAR(rep.closed_form_constant, -double(m), 1e-12);
  EXPECT_TRUE(rep.constant_across_trials);
}

TEST(Equivalence, RandomJointsMatchLoopOracle) {
  Rng rng = make_rng(12, {});
  for (int m = 2; m <= 8; ++m) {
    const auto g = AffinityGraph::from_joint(random_symmetric_joint(m, rng));
    for (int d = 1; d <= 4; ++d) {
      const auto rep = equivalence_check(g, d, 20, 0.5, rng);
      EXPECT_LT(rep.constant_variance, 1e-8) << "m " << m << " d " << d;
      EXPECT_NEAR(rep.constant_mean, -g.adjacency.squaredNorm(), 1e-8);
      for (const auto& t : rep.trials) EXPECT_NEAR(t.constant, -g.adjacency.squaredNorm(), 1e-8);
    }
    Rng zr = make_rng(13, {std::uint64_t(m)});
    const MatrixXd z = random_unit_columns(3, m, zr);
    EXPECT_NEAR(equivalence_trial(g, z, 0.5).constant, naive_constant(g, z, 0.5), 1e-10);
  }
}

TEST(Equivalence, ResidualCarriesTheFeatureDependence) {
  Rng rng = make_rng(14, {});
  const auto g = AffinityGraph::from_joint(random_symmetric_joint(6, rng));
  const auto rep = equivalence_check(g, 3, 20, 0.5, rng);
  EXPECT_GT(rep.difference_variance, 1e-6);
}

TEST(Equivalence, SinglePointSpace) {
  const auto g = AffinityGraph::from_joint(MatrixXd::Ones(1, 1));
  Rng rng = make_rng(15, {});
  const auto rep = equivalence_check(g, 2, 20, 0.5, rng);
  for (const auto& t : rep.trials) {
    EXPECT_NEAR(t.expected_alignment, -2.0, 1e-12);
    EXPECT_NEAR(t.spectral, 0.0, 1e-12);
  }
  EXPECT_LT(rep.difference_variance, 1e-20);
}

TEST(Equivalence, BlockMinimizerSeparatesBlocks) {
  const auto g = AffinityGraph::from_joint(block_joint({2, 4}));
  Rng rng = make_rng(16, {});
  const MatrixXd f = minimize_spectral_objective(g.adjacency, 2, rng);
  const MatrixXd sim = f.transpose() * f;
  EXPECT_LT(sim.topRightCorner(2, 4).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_NEAR(spectral_objective(f, g.adjacency), 0.0, 1e-8);
}

TEST(Equivalence, WrongFeatureCountThrows) {
  const auto g = AffinityGraph::from_joint(MatrixXd::Identity(3, 3) / 3);
  EXPECT_THROW(equivalence_trial(g, MatrixXd::Identity(2, 2), 0.5), ConfigError);
}

TEST(Bound, ResidualMassExamples) {
  VectorXd ev(4);
  ev << 1.0, 0.5, 0.2, 0.1;
  EXPECT_NEAR(residual_eigen_mass(ev, 2), 0.05, 1e-15);
  EXPECT_EQ(residual_eigen_mass(ev, 4), 0.0);
  EXPECT_EQ(residual_eigen_mass(ev, 9), 0.0);
}

TEST(Bound, PerfectClustersHaveNoResidualMass) {
  const auto g = AffinityGraph::from_joint(block_joint({4, 4, 4}));
  const VectorXd ev = g.eigenvalues_desc();
  EXPECT_NEAR(ev[2], 1.0, 1e-12);
  EXPECT_LT(residual_eigen_mass(ev, 3), 1e-20);
  ClusterGraph cg;
  cg.joint = g.joint;
  for (int i = 0; i < 12; ++i) cg.labels.push_back(i / 4);
  EXPECT_EQ(spectral_probe_error(cg, 3, 3, 0), 0.0);
}

TEST(Bound, DiagnosticSortsAndChecksDirection) {
  VectorXd a(3), b(3);
  a << 1, 0.9, 0.1;
  b << 1, 0.5, 0.5;
  // Residual mass: a -> 0.82, b -> 0.5.
  const auto up = bound_diagnostic({{{a, 1, 0.1}, 0.3}, {{b, 1, 0.1}, 0.2}});
  EXPECT_TRUE(up.monotone);
  EXPECT_NEAR(up.rows[0].residual_mass, 0.5, 1e-15);
  EXPECT_NEAR(up.rows[1].residual_mass, 0.82, 1e-15);
  EXPECT_EQ(up.rows[0].probe_error, 0.2);
  EXPECT_FALSE(bound_diagnostic({{{a, 1, 0.1}, 0.1}, {{b, 1, 0.1}, 0.2}}).monotone);
  const auto full = bound_diagnostic({{{a, 3, 0.2}, 0.0}});
  EXPECT_TRUE(full.rows[0].degenerate);
  EXPECT_EQ(full.rows[0].residual_mass, 0.0);
  VectorXd unsorted(2);
  unsorted << 0.1, 1.0;
  EXPECT_THROW(bound_diagnostic({{{unsorted, 1, 0}, 0}}), ConfigError);
}

TEST(Bound, ClusterGraphAlphaMatchesCrossMass) {
  Rng rng = make_rng(17, {});
  const auto cg = make_cluster_graph(3, 5, 0.3, 4, rng);
  EXPECT_NEAR(cg.joint.sum(), 1.0, 1e-12);
  EXPECT_LT((cg.joint - cg.joint.transpose()).norm(), 1e-15);
  double cross = 0;
  for (int i = 0; i < 15; ++i)
    for (int j = 0; j < 15; ++j)
      if (i / 5 != j / 5) cross += cg.joint(i, j);
  EXPECT_NEAR(cg.alpha, cross, 1e-14);
  Rng rng0 = make_rng(17, {});
  EXPECT_EQ(make_cluster_graph(3, 5, 0.0, 4, rng0).alpha, 0.0);
}

TEST(Suites, AllPass) {
  for (const char* name : {"coding", "equivalence", "bound"}) {
    const auto r = run_suite(name, 0);
    EXPECT_TRUE(r.at("pass").get<bool>()) << name << ": " << r.dump(2);
  }
  EXPECT_THROW(run_suite("nope"), ConfigError);
}

TEST(Suites, BoundDirectionHoldsAcrossSuiteSeeds) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto r = bound_suite(seed);
    EXPECT_TRUE(r.at("density_family").at("monotone").get<bool>()) << "seed " << seed;
  }
}

}  // namespace
}  // namespace igm::theory
