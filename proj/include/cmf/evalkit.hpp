#pragma once

// Evaluation: Gaussian-moment distance between sample sets, likelihoods,
// prominent latent dimensions and the OoD stump.

#include <string>
#include <vector>

#include "cmf/injective.hpp"

namespace cmf::evalkit {

using injective::InjectiveFlow;
using linalg::Matrix;
using linalg::Vector;

struct GaussianMoments {
  Vector mu;
  Matrix sigma;  // unbiased, 1/(n-1)
};

GaussianMoments moments(const Matrix& x);

/// Squared 2-Wasserstein distance between N(mu_a, S_a) and N(mu_b, S_b):
///   |mu_a - mu_b|^2 + tr S_a + tr S_b - 2 tr (S_a^1/2 S_b S_a^1/2)^1/2
/// Eigenvalues in (-1e-8, 0) are clamped to 0; anything more negative throws
/// MomentDegeneracy.
double fid_like(const GaussianMoments& a, const GaussianMoments& b);

/// Square root of a symmetric PSD matrix with the same clamping policy.
Matrix psd_sqrt(const Matrix& s);

/// Per-row log p(x) at the projections, exact log-det.
Vector loglik_rows(const InjectiveFlow& gf, const Matrix& x, int threads = 1);
double mean_loglik(const InjectiveFlow& gf, const Matrix& x, int threads = 1);

/// The k indices with the largest |profile|, ties to the lower index, in
/// that order.
std::vector<int> prominent_dims(const Vector& profile, int k);

/// Prior draws with every coordinate outside `dims` set to zero. All d
/// coordinates are drawn regardless, so `dims` = all reproduces unrestricted
/// sampling under the same seed.
Matrix restricted_latent(int d, const std::vector<int>& dims, Eigen::Index n, linalg::Rng& rng);
Matrix restricted_sample(const InjectiveFlow& gf, const std::vector<int>& dims, Eigen::Index n,
                         linalg::Rng& rng);

struct StumpResult {
  double threshold = 0.0;  // predict in-distribution when loglik > threshold
  double accuracy = 0.5;   // balanced accuracy
};
StumpResult ood_stump(const std::vector<double>& loglik_in, const std::vector<double>& loglik_out);

struct SweepPoint {
  int k = 0;
  std::vector<int> dims;
  double fid_like = 0.0;
  double mse = 0.0;  // reconstruction with non-prominent latents zeroed
};

/// FID-like score and restricted reconstruction MSE for each k.
std::vector<SweepPoint> prominent_sweep(const InjectiveFlow& gf, const Matrix& x, const Vector& profile,
                                        const std::vector<int>& ks, linalg::Rng& rng);

/// Sweep sizes {1, 8, 16, 24, 32, 40} restricted to [1, d], plus d.
std::vector<int> default_sweep_sizes(int d);

struct EvalReport {
  double fid_like = 0.0;
  double mean_loglik = 0.0;
  double macs = 0.0;
  Vector diag_profile;
  std::vector<int> prominent_order;
};

std::string to_json(const EvalReport& r, int indent = 2);

}  // namespace cmf::evalkit
