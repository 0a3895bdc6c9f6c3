#include "cmf/metric.hpp"

#include <cmath>
#include <memory>

#include "cmf/error.hpp"

namespace cmf::metric {

using injective::basis_seeds;
using injective::ChartPass;
using injective::jacobian_row;

void validate(const EstimatorConfig& cfg) {
  if (cfg.probes < 1) throw Error(ErrorCode::InvalidArgument, "EstimatorConfig: probes must be >= 1");
  if (!(cfg.cg_tol > 0.0)) throw Error(ErrorCode::InvalidArgument, "EstimatorConfig: cg_tol must be > 0");
}

const char* to_string(EstimatorMode mode) {
  return mode == EstimatorMode::Exact ? "exact" : "stochastic";
}

EstimatorMode estimator_mode_from_string(const std::string& s) {
  if (s == "exact") return EstimatorMode::Exact;
  if (s == "stochastic") return EstimatorMode::Stochastic;
  throw Error(ErrorCode::Config, "unknown estimator mode '" + s + "' (expected exact|stochastic)");
}

Matrix jacobian(const InjectiveFlow& gf, const Vector& z) {
  const int d = gf.latent_dim();
  const ChartPass pass = gf.chart_forward(z.transpose(), basis_seeds(1, d), {});
  return jacobian_row(pass.tangents(), 0, 0, d);
}

std::vector<Matrix> jacobians(const InjectiveFlow& gf, const Matrix& z) {
  const int d = gf.latent_dim();
  const ChartPass pass = gf.chart_forward(z, basis_seeds(z.rows(), d), {});
  std::vector<Matrix> out;
  out.reserve(z.rows());
  for (Eigen::Index r = 0; r < z.rows(); ++r) out.push_back(jacobian_row(pass.tangents(), r, 0, d));
  return out;
}

MetricTensor metric_tensor(const Matrix& j, const Vector& origin) {
  if (!j.allFinite()) throw Error(ErrorCode::NonFinite, "metric_tensor: non-finite Jacobian");
  Matrix g = j.transpose() * j;
  g = 0.5 * (g + g.transpose()).eval();
  return {std::move(g), origin};
}

double offdiag_l1(const Matrix& g) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    for (Eigen::Index j = 0; j < g.cols(); ++j) {
      if (i != j) s += std::abs(g(i, j));
    }
  }
  return s;
}

double offdiag_l1(const MetricTensor& g) { return offdiag_l1(g.g); }

Matrix offdiag_l1_jacobian_cotangent(const Matrix& j, const Matrix& g) {
  const Eigen::Index d = g.rows();
  Matrix s = Matrix::Zero(d, d);
  for (Eigen::Index a = 0; a < d; ++a) {
    for (Eigen::Index b = 0; b < d; ++b) {
      if (a != b) s(a, b) = static_cast<double>((g(a, b) > 0.0) - (g(a, b) < 0.0));
    }
  }
  return 2.0 * j * s;
}

namespace {

/// Accumulates d/dtheta sum_i <W_i, J e_i> at fixed z.
ParamGrad grad_from_column_cotangent(const InjectiveFlow& gf, const ChartPass& pass, const Matrix& w) {
  const int d = gf.latent_dim();
  flownet::Tangents bars(d);
  for (int i = 0; i < d; ++i) bars[i] = w.col(i).transpose();
  ParamGrad grad(gf.param_count(), 0.0);
  gf.chart_reverse(pass, Matrix::Zero(1, gf.data_dim()), bars, Vector::Zero(1), grad);
  return grad;
}

}  // namespace

ParamGrad offdiag_l1_grad(const InjectiveFlow& gf, const Vector& z) {
  const int d = gf.latent_dim();
  const ChartPass pass = gf.chart_forward(z.transpose(), basis_seeds(1, d), {});
  const Matrix j = jacobian_row(pass.tangents(), 0, 0, d);
  const Matrix g = metric_tensor(j).g;
  return grad_from_column_cotangent(gf, pass, offdiag_l1_jacobian_cotangent(j, g));
}

double half_logdet_exact(const MetricTensor& g) { return 0.5 * linalg::cholesky_logdet(g.g).logdet; }

ParamGrad half_logdet_grad_exact(const InjectiveFlow& gf, const Vector& z) {
  const int d = gf.latent_dim();
  const ChartPass pass = gf.chart_forward(z.transpose(), basis_seeds(1, d), {});
  const Matrix j = jacobian_row(pass.tangents(), 0, 0, d);
  const Matrix g = metric_tensor(j).g;
  linalg::cholesky_logdet(g);  // rank check
  const Matrix w = j * g.ldlt().solve(Matrix::Identity(d, d));
  return grad_from_column_cotangent(gf, pass, w);
}

linalg::SpdOperator jtj_operator(const InjectiveFlow& gf, const Vector& z) {
  auto base = std::make_shared<ChartPass>(gf.chart_forward(z.transpose(), {}, {}));
  const Matrix zrow = z.transpose();
  return {gf.latent_dim(), [&gf, base, zrow](const Vector& v) -> Vector {
            const ChartPass pass = gf.chart_forward(zrow, {Matrix(v.transpose())}, {});
            const Matrix jv = pass.tangents()[0];
            return gf.chart_reverse(*base, jv, {}, Vector::Zero(1), {}).row(0).transpose();
          }};
}

StochasticGrad half_logdet_grad_stochastic(const InjectiveFlow& gf, const Vector& z,
                                           const EstimatorConfig& cfg, linalg::Rng& rng) {
  validate(cfg);
  if (cfg.mode != EstimatorMode::Stochastic) {
    throw Error(ErrorCode::InvalidArgument, "half_logdet_grad_stochastic: estimator mode must be stochastic");
  }
  const int d = gf.latent_dim();
  const linalg::SpdOperator op = jtj_operator(gf, z);

  StochasticGrad out;
  flownet::Tangents seeds;
  seeds.reserve(2 * cfg.probes);
  for (int k = 0; k < cfg.probes; ++k) {
    const Vector eps = linalg::gaussian_probe(rng, d);
    const linalg::CgResult cg = linalg::cg_solve(op, eps, {cfg.cg_tol, 0});
    out.converged = out.converged && cg.converged;
    out.cg_iterations += cg.iters;
    seeds.push_back(cg.x.transpose());
    seeds.push_back(eps.transpose());
  }

  const ChartPass pass = gf.chart_forward(z.transpose(), seeds, {});
  const double scale = 0.5 / cfg.probes;
  flownet::Tangents bars(seeds.size());
  for (int k = 0; k < cfg.probes; ++k) {
    const Matrix& ju = pass.tangents()[2 * k];
    const Matrix& je = pass.tangents()[2 * k + 1];
    bars[2 * k] = scale * je;
    bars[2 * k + 1] = scale * ju;
  }
  out.grad.assign(gf.param_count(), 0.0);
  gf.chart_reverse(pass, Matrix::Zero(1, gf.data_dim()), bars, Vector::Zero(1), out.grad);
  return out;
}

Matrix abs_cosine_matrix(const Matrix& j) {
  const Eigen::Index d = j.cols();
  const Vector norms = j.colwise().norm().transpose();
  Matrix c = Matrix::Zero(d, d);
  for (Eigen::Index a = 0; a < d; ++a) {
    for (Eigen::Index b = 0; b < d; ++b) {
      if (norms[a] >= 1e-12 && norms[b] >= 1e-12) {
        c(a, b) = std::abs(j.col(a).dot(j.col(b))) / (norms[a] * norms[b]);
      }
    }
  }
  return c;
}

double macs(const Matrix& j) {
  const Eigen::Index d = j.cols();
  const Vector norms = j.colwise().norm().transpose();
  double total = 0.0;
  long pairs = 0;
  for (Eigen::Index a = 0; a < d; ++a) {
    if (norms[a] < 1e-12) continue;
    for (Eigen::Index b = a + 1; b < d; ++b) {
      if (norms[b] < 1e-12) continue;
      total += std::abs(j.col(a).dot(j.col(b))) / (norms[a] * norms[b]);
      ++pairs;
    }
  }
  return pairs > 0 ? total / static_cast<double>(pairs) : 0.0;
}

Vector diag_profile(const Matrix& z, const InjectiveFlow& gf) {
  if (z.rows() == 0) throw Error(ErrorCode::InvalidArgument, "diag_profile: empty batch");
  const int d = gf.latent_dim();
  const ChartPass pass = gf.chart_forward(z, basis_seeds(z.rows(), d), {});
  Vector profile(d);
  for (int k = 0; k < d; ++k) {
    profile[k] = pass.tangents()[k].rowwise().squaredNorm().mean();
  }
  return profile;
}

}  // namespace cmf::metric
