#pragma once

// Pullback metric G = J^T J of the chart dx/dz, the off-diagonal l1 penalty,
// log-det gradients (exact and Hutchinson/CG) and basis diagnostics.

#include "cmf/injective.hpp"

namespace cmf::metric {

using injective::InjectiveFlow;
using linalg::Matrix;
using linalg::Vector;
using flownet::ParamGrad;

struct MetricTensor {
  Matrix g;
  Vector origin;
};

enum class EstimatorMode { Exact, Stochastic };

struct EstimatorConfig {
  int probes = 1;
  double cg_tol = 1e-3;
  EstimatorMode mode = EstimatorMode::Exact;
};

void validate(const EstimatorConfig& cfg);
const char* to_string(EstimatorMode mode);
EstimatorMode estimator_mode_from_string(const std::string& s);

/// D x d Jacobian of embed at z, one JVP column per latent direction.
Matrix jacobian(const InjectiveFlow& gf, const Vector& z);

MetricTensor metric_tensor(const Matrix& j, const Vector& origin = {});

/// sum_{i != j} |G_ij|, both triangles.
double offdiag_l1(const MetricTensor& g);
double offdiag_l1(const Matrix& g);

/// Cotangent of offdiag_l1 w.r.t. the Jacobian columns: 2 sum_{j!=i} sign(G_ij) J_j.
/// sign(0) is taken as 0.
Matrix offdiag_l1_jacobian_cotangent(const Matrix& j, const Matrix& g);

/// Parameter gradient of offdiag_l1(J(z)^T J(z)) at fixed z.
ParamGrad offdiag_l1_grad(const InjectiveFlow& gf, const Vector& z);

double half_logdet_exact(const MetricTensor& g);

/// Parameter gradient of 1/2 log det J^T J at fixed z, from
/// d/dJ (1/2 log det J^T J) = J (J^T J)^{-1}.
ParamGrad half_logdet_grad_exact(const InjectiveFlow& gf, const Vector& z);

struct StochasticGrad {
  ParamGrad grad;
  bool converged = true;  // every CG solve reached tolerance
  int cg_iterations = 0;  // summed over probes
};

/// Hutchinson estimate of the same gradient:
///   1/(2K) sum_k d/dtheta [ u_k^T J^T J eps_k ],  u_k = CG(J^T J; eps_k),
/// with J^T J applied matrix-free as rect_vjp(rect_jvp(.)) and u_k, eps_k held
/// constant under differentiation.
StochasticGrad half_logdet_grad_stochastic(const InjectiveFlow& gf, const Vector& z,
                                           const EstimatorConfig& cfg, linalg::Rng& rng);

/// Matrix-free J^T J at z.
linalg::SpdOperator jtj_operator(const InjectiveFlow& gf, const Vector& z);

/// Mean |cos| over column pairs; columns with norm < 1e-12 are skipped.
double macs(const Matrix& j);

/// d x d matrix of |cos| between Jacobian columns (0 where undefined).
Matrix abs_cosine_matrix(const Matrix& j);

/// Per-dimension mean of G_kk over a batch of latent points (one per row).
Vector diag_profile(const Matrix& z, const InjectiveFlow& gf);

/// Composite Jacobians for every row of z.
std::vector<Matrix> jacobians(const InjectiveFlow& gf, const Matrix& z);

}  // namespace cmf::metric
