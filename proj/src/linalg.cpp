#include "cmf/linalg.hpp"

#include <cmath>

#include "cmf/error.hpp"

namespace cmf {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Config: return "ConfigError";
    case ErrorCode::NotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorCode::Breakdown: return "Breakdown";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::MomentDegeneracy: return "MomentDegeneracy";
    case ErrorCode::Parse: return "ParseError";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
    case ErrorCode::Io: return "IoError";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
  }
  return "Unknown";
}

}  // namespace cmf

namespace cmf::linalg {

namespace {

bool try_cholesky(const Matrix& g, double shift, Matrix& l) {
  const Eigen::Index n = g.rows();
  l.setZero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double pivot = g(j, j) + shift;
    for (Eigen::Index k = 0; k < j; ++k) pivot -= l(j, k) * l(j, k);
    if (!(pivot > 0.0)) return false;
    const double ljj = std::sqrt(pivot);
    l(j, j) = ljj;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      double s = g(i, j);
      for (Eigen::Index k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return true;
}

}  // namespace

CholeskyResult cholesky_logdet(const Matrix& g) {
  if (g.rows() != g.cols() || g.rows() == 0) {
    throw Error(ErrorCode::InvalidArgument, "cholesky_logdet: matrix must be square and nonempty");
  }
  if (!g.allFinite()) {
    throw Error(ErrorCode::NonFinite, "cholesky_logdet: non-finite entries");
  }
  const double mean_diag = g.diagonal().mean();
  const double shifts[] = {0.0, 1e-9 * mean_diag, 1e-6 * mean_diag};

  CholeskyResult out;
  for (double shift : shifts) {
    if (shift < 0.0) break;
    if (try_cholesky(g, shift, out.factor)) {
      out.jitter = shift;
      out.logdet = 2.0 * out.factor.diagonal().array().log().sum();
      return out;
    }
  }
  throw Error(ErrorCode::NotPositiveDefinite,
              "cholesky_logdet: non-positive pivot after jitter (degenerate chart?)");
}

CgResult cg_solve(const SpdOperator& a, const Vector& b, const CgOptions& options) {
  if (a.dim != b.size()) {
    throw Error(ErrorCode::DimensionMismatch, "cg_solve: operator and rhs sizes differ");
  }
  if (!(options.tol > 0.0)) throw Error(ErrorCode::InvalidArgument, "cg_solve: tol must be > 0");
  if (!b.allFinite()) throw Error(ErrorCode::NonFinite, "cg_solve: rhs not finite");

  const int max_iter = options.max_iter > 0 ? options.max_iter : 5 * a.dim;
  CgResult out;
  out.x = Vector::Zero(a.dim);

  Vector r = b;
  Vector p = r;
  double rr = r.squaredNorm();
  const double target = options.tol * b.norm();
  out.residual_norms.push_back(std::sqrt(rr));
  if (std::sqrt(rr) <= target) {
    out.converged = true;
    return out;
  }

  while (out.iters < max_iter) {
    const Vector ap = a.apply(p);
    const double pap = p.dot(ap);
    if (!(pap > 0.0)) {
      throw Error(ErrorCode::Breakdown, "cg_solve: p^T A p <= 0, operator is not positive definite");
    }
    const double alpha = rr / pap;
    out.x += alpha * p;
    r -= alpha * ap;
    ++out.iters;
    const double rr_new = r.squaredNorm();
    out.residual_norms.push_back(std::sqrt(rr_new));
    if (std::sqrt(rr_new) <= target) {
      out.converged = true;
      break;
    }
    p = r + (rr_new / rr) * p;
    rr = rr_new;
  }
  return out;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

Rng Rng::split(std::uint64_t stream) const {
  return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x632be59bd9b4e019ULL)));
}

double Rng::uniform() {
  // 53 random bits -> [0, 1)
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() { return normal_(engine_); }

std::size_t Rng::index(std::size_t n) {
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  return dist(engine_);
}

Vector gaussian_probe(Rng& rng, int dim) {
  if (dim < 1) throw Error(ErrorCode::InvalidArgument, "gaussian_probe: dim must be >= 1");
  Vector v(dim);
  for (int i = 0; i < dim; ++i) v[i] = rng.normal();
  return v;
}

}  // namespace cmf::linalg
