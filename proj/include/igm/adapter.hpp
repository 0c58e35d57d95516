#pragma once

// Feature fusion between encoder and generator: a high-pass token filter that strips the
// component shared by all tokens of a sequence, and adaptive layer norm that injects the
// filtered condition plus the timestep into the generator.

#include <cmath>

#include "igm/autodiff.hpp"
#include "igm/error.hpp"

namespace igm {

struct AdapterConfig {
  double eta = 0.5;          // high-pass strength; 0 disables filtering
  double temperature = 1.0;  // token-similarity temperature inside the softmax

  void validate() const {
    if (eta < 0) throw ConfigError("adapter eta must be >= 0");
    if (temperature <= 0) throw ConfigError("adapter temperature must be > 0");
  }
};

template <typename S>
void require_unit_rows(const ad::Mat<S>& z, double tol = 1e-6) {
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    if (std::abs(double(z.row(i).norm()) - 1.0) > tol)
      throw NumericError("row " + std::to_string(i) + " is not unit-norm (norm " +
                         std::to_string(double(z.row(i).norm())) + ")");
}

/// sum_i log sum_j exp(z_i . z_j) over unit-norm token rows.
template <typename S>
S uniformity_loss(const ad::Mat<S>& z) {
  require_unit_rows(z);
  const ad::Mat<S> sim = z * z.transpose();
  S total = 0;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    const S mx = sim.row(i).maxCoeff();
    total += mx + std::log((sim.row(i).array() - mx).exp().sum());
  }
  return total;
}

/// z_hat = (1 + eta) z - eta softmax(z z^T / temperature) z, softmax taken per row.
template <typename S>
ad::Var<S> high_pass_fuse(ad::Var<S> z, double eta, double temperature = 1.0) {
  if (eta == 0.0) return z;
  auto sim = ad::scale(ad::matmul_nt(z, z), S(1.0 / temperature));
  auto smooth = ad::matmul(ad::softmax_rows(sim), z);
  return ad::sub(ad::scale(z, S(1.0 + eta)), ad::scale(smooth, S(eta)));
}

template <typename S>
ad::Mat<S> high_pass_fuse(const ad::Mat<S>& z, double eta, double temperature = 1.0) {
  ad::Tape<S> tape;
  return high_pass_fuse(tape.constant(z), eta, temperature).value();
}

/// Encoder tokens -> unit rows -> high-pass filter. Returns the filtered token matrix.
template <typename S>
ad::Var<S> filter_tokens(ad::Var<S> tokens, const AdapterConfig& cfg) {
  return high_pass_fuse(ad::l2_normalize_rows(tokens), cfg.eta, cfg.temperature);
}

/// One global condition vector per sequence: the mean of the filtered tokens.
template <typename S>
ad::Var<S> condition_vector(ad::Var<S> tokens, const AdapterConfig& cfg) {
  return ad::mean_rows(filter_tokens(tokens, cfg));
}

/// Scale/shift rows (each 1 x d) for one AdaLN site.
template <typename S>
struct AdaModulation {
  ad::Var<S> cond_scale, cond_shift, time_scale, time_shift;
};

/// cond_scale * (time_scale * LN(h) + time_shift) + cond_shift, broadcast over tokens.
template <typename S>
ad::Var<S> ada_layer_norm(ad::Var<S> h, const AdaModulation<S>& m) {
  auto inner = ad::add_row(ad::mul_row(ad::layer_norm_rows(h), m.time_scale), m.time_shift);
  return ad::add_row(ad::mul_row(inner, m.cond_scale), m.cond_shift);
}

}  // namespace igm
