#pragma once

// Downstream measurements on frozen features: linear probe, k-NN, singular-value spectrum,
// MPJPE and a Frechet distance between Gaussian fits of two feature sets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "igm/error.hpp"
#include "igm/rng.hpp"
#include "igm/skeleton.hpp"

namespace igm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline void check_labels(const std::vector<int>& labels, int num_classes, const char* what) {
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw ConfigError(std::string(what) + " label " + std::to_string(labels[i]) + " at index " +
                        std::to_string(i) + " is outside [0, " + std::to_string(num_classes) + ")");
}

inline void check_features(const MatrixXd& x, const std::vector<int>& y, const char* what) {
  if (x.rows() != Eigen::Index(y.size()))
    throw ConfigError(std::string(what) + " features and labels differ in count");
  if (!x.allFinite()) throw NumericError(std::string(what) + " features are not finite");
}

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.size() != truth.size()) throw ConfigError("prediction count mismatch");
  if (truth.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
  return double(hit) / double(truth.size());
}

// ---------------------------------------------------------------------------
// Linear probe.

struct ProbeParams {
  MatrixXd weight;  // K x d
  VectorXd bias;    // K

  std::vector<int> predict(const MatrixXd& x) const {
    const MatrixXd logits = (x * weight.transpose()).rowwise() + bias.transpose();
    std::vector<int> out(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) logits.row(i).maxCoeff(&out[i]);
    return out;
  }
};

struct ProbeOptions {
  int epochs = 200;
  double lr = 0.1;
  std::uint64_t seed = 0;
  double init_scale = 0.01;
};

/// Softmax regression by full-batch gradient descent with a cosine learning-rate decay.
inline ProbeParams train_probe(const MatrixXd& x, const std::vector<int>& y, int num_classes,
                               const ProbeOptions& opt = {}) {
  check_features(x, y, "train");
  if (num_classes < 1) throw ConfigError("probe needs at least one class");
  check_labels(y, num_classes, "train");
  const Eigen::Index n = x.rows(), d = x.cols();
  Rng rng = make_rng(opt.seed, {0x9b0eULL});
  ProbeParams p;
  p.weight.resize(num_classes, d);
  for (Eigen::Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = gaussian(rng, 0.0, opt.init_scale);
  p.bias = VectorXd::Zero(num_classes);
  MatrixXd onehot = MatrixXd::Zero(n, num_classes);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, y[i]) = 1.0;
  for (int e = 0; e < opt.epochs; ++e) {
    const double lr = opt.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * e / opt.epochs));
    MatrixXd logits = (x * p.weight.transpose()).rowwise() + p.bias.transpose();
    const VectorXd mx = logits.rowwise().maxCoeff();
    MatrixXd prob = (logits.colwise() - mx).array().exp().matrix();
    prob.array().colwise() /= prob.rowwise().sum().array();
    const MatrixXd delta = (prob - onehot) / double(n);
    p.weight -= lr * delta.transpose() * x;
    p.bias -= lr * delta.colwise().sum().transpose();
  }
  return p;
}

/// Top-1 validation accuracy of a probe trained on (train_x, train_y).
inline double linear_probe(const MatrixXd& train_x, const std::vector<int>& train_y, const MatrixXd& val_x,
                           const std::vector<int>& val_y, int num_classes, const ProbeOptions& opt = {}) {
  check_features(val_x, val_y, "val");
  check_labels(val_y, num_classes, "val");
  if (val_x.cols() != train_x.cols()) throw ConfigError("train and val feature widths differ");
  return accuracy(train_probe(train_x, train_y, num_classes, opt).predict(val_x), val_y);
}

// ---------------------------------------------------------------------------
// k-NN.

inline MatrixXd normalize_rows(MatrixXd x) {
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double n = x.row(i).norm();
    if (n > 0) x.row(i) /= n;
  }
  return x;
}

/// Cosine-similarity k-NN majority vote. A tied vote goes to the tied class whose member
/// ranks nearest. `excluded[i]`, when given, names one train row that val row i may not
/// match (-1 for none).
inline std::vector<int> knn_predict(const MatrixXd& train_x, const std::vector<int>& train_y, const MatrixXd& val_x,
                                    int k = 1, const std::vector<int>& excluded = {}) {
  if (k < 1) throw ConfigError("k must be >= 1");
  if (train_x.rows() == 0) throw ConfigError("k-NN needs at least one training point");
  if (train_x.cols() != val_x.cols()) throw ConfigError("train and val feature widths differ");
  if (!excluded.empty() && Eigen::Index(excluded.size()) != val_x.rows())
    throw ConfigError("exclusion list must have one entry per val row");
  const MatrixXd sim = normalize_rows(val_x) * normalize_rows(train_x).transpose();
  const int max_label = *std::max_element(train_y.begin(), train_y.end());
  std::vector<int> out(val_x.rows());
  std::vector<int> order;
  for (Eigen::Index i = 0; i < val_x.rows(); ++i) {
    order.clear();
    for (int j = 0; j < int(train_x.rows()); ++j)
      if (excluded.empty() || excluded[i] != j) order.push_back(j);
    if (order.empty()) throw ConfigError("no neighbours left after exclusion");
    const int kk = std::min<int>(k, int(order.size()));
    std::partial_sort(order.begin(), order.begin() + kk, order.end(), [&](int a, int b) {
      return sim(i, a) > sim(i, b) || (sim(i, a) == sim(i, b) && a < b);
    });
    std::vector<int> votes(max_label + 1, 0), first_rank(max_label + 1, kk);
    for (int r = 0; r < kk; ++r) {
      const int lbl = train_y[order[r]];
      ++votes[lbl];
      first_rank[lbl] = std::min(first_rank[lbl], r);
    }
    int best = train_y[order[0]];
    for (int c = 0; c <= max_label; ++c)
      if (votes[c] > votes[best] || (votes[c] == votes[best] && first_rank[c] < first_rank[best])) best = c;
    out[i] = best;
  }
  return out;
}

/// k-NN accuracy. With `exclude_self` the two sets must be the same and row i never
/// matches itself.
inline double knn_eval(const MatrixXd& train_x, const std::vector<int>& train_y, const MatrixXd& val_x,
                       const std::vector<int>& val_y, int k = 1, bool exclude_self = false) {
  check_features(train_x, train_y, "train");
  check_features(val_x, val_y, "val");
  for (int y : train_y)
    if (y < 0) throw ConfigError("negative train label");
  std::vector<int> excluded;
  if (exclude_self) {
    if (train_x.rows() != val_x.rows()) throw ConfigError("exclude_self needs identical sets");
    excluded.resize(val_x.rows());
    std::iota(excluded.begin(), excluded.end(), 0);
  }
  return accuracy(knn_predict(train_x, train_y, val_x, k, excluded), val_y);
}

// ---------------------------------------------------------------------------
// Spectrum.

struct SpectrumReport {
  VectorXd singular_values;  // descending
  VectorXd normalized;       // sigma_i / sum sigma
  double effective_rank = 0;
};

/// Singular values of the (optionally column-centered) m x d feature matrix and
/// exp(entropy of the normalized singular values).
inline SpectrumReport spectrum(const MatrixXd& features, bool center = true) {
  if (features.rows() == 0 || features.cols() == 0) throw ConfigError("empty feature matrix");
  MatrixXd x = features;
  if (center) x.rowwise() -= x.colwise().mean();
  SpectrumReport r;
  r.singular_values = Eigen::BDCSVD<MatrixXd>(x).singularValues();
  const double total = r.singular_values.sum();
  r.normalized = total > 0 ? VectorXd(r.singular_values / total) : VectorXd::Zero(r.singular_values.size());
  double h = 0;
  for (Eigen::Index i = 0; i < r.normalized.size(); ++i)
    if (r.normalized[i] > 0) h -= r.normalized[i] * std::log(r.normalized[i]);
  r.effective_rank = total > 0 ? std::exp(h) : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Reconstruction error.

/// (t, v) selection, row-major [t][v].
struct RegionMask {
  int frames = 0, joints = 0;
  std::vector<std::uint8_t> on;

  RegionMask() = default;
  RegionMask(int t, int v, bool value = false) : frames(t), joints(v), on(std::size_t(t) * v, value ? 1 : 0) {}
  bool at(int t, int v) const { return on[std::size_t(t) * joints + v] != 0; }
  void set(int t, int v, bool value = true) { on[std::size_t(t) * joints + v] = value ? 1 : 0; }
  std::size_t count() const { return std::size_t(std::count(on.begin(), on.end(), 1)); }
};

/// Mean Euclidean joint error over the region, in millimeters. `meters_per_unit` converts
/// the sequences' coordinates to meters.
inline double mpjpe(const SkeletonSequence& pred, const SkeletonSequence& gt, const RegionMask& region,
                    double meters_per_unit = 1.0) {
  if (!pred.same_shape(gt)) throw ConfigError("prediction and ground truth differ in shape");
  if (region.frames != gt.frames || region.joints != gt.joints) throw ConfigError("region mask shape mismatch");
  double sum = 0;
  std::size_t n = 0;
  for (int t = 0; t < gt.frames; ++t)
    for (int v = 0; v < gt.joints; ++v) {
      if (!region.at(t, v)) continue;
      double sq = 0;
      for (int c = 0; c < gt.channels; ++c) sq += std::pow(pred.at(t, v, c) - gt.at(t, v, c), 2);
      sum += std::sqrt(sq);
      ++n;
    }
  if (n == 0) throw ConfigError("empty MPJPE region");
  return 1000.0 * meters_per_unit * sum / double(n);
}

// ---------------------------------------------------------------------------
// Feature-space Frechet distance.

struct FrechetResult {
  double value = 0;
  bool regularized = false;
};

inline MatrixXd covariance(const MatrixXd& x) {
  const MatrixXd c = x.rowwise() - x.colwise().mean();
  return c.transpose() * c / double(std::max<Eigen::Index>(1, x.rows() - 1));
}

inline MatrixXd psd_sqrt(const MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (m + m.transpose()));
  const VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2}). A set with no
/// more samples than dimensions gets `ridge` * I added to its covariance.
inline FrechetResult feature_frechet(const MatrixXd& a, const MatrixXd& b, double ridge = 1e-6) {
  if (a.cols() != b.cols()) throw ConfigError("feature sets differ in width");
  if (a.rows() < 1 || b.rows() < 1) throw ConfigError("empty feature set");
  FrechetResult r;
  const Eigen::Index d = a.cols();
  MatrixXd sa = covariance(a), sb = covariance(b);
  if (a.rows() <= d) {
    sa += ridge * MatrixXd::Identity(d, d);
    r.regularized = true;
  }
  if (b.rows() <= d) {
    sb += ridge * MatrixXd::Identity(d, d);
    r.regularized = true;
  }
  const MatrixXd ra = psd_sqrt(sa);
  const double cross = psd_sqrt(ra * sb * ra).trace();
  const double mean_term = (a.colwise().mean() - b.colwise().mean()).squaredNorm();
  r.value = std::max(0.0, mean_term + sa.trace() + sb.trace() - 2.0 * cross);
  return r;
}

}  // namespace igm
