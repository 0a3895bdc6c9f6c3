#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cmf::linalg {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Cholesky with jitter
// ---------------------------------------------------------------------------

struct CholeskyResult {
  double logdet = 0.0;
  Matrix factor;        // lower triangular, L * L^T ~ G (+ jitter)
  double jitter = 0.0;  // diagonal shift that was applied, 0 if none
};

/// log det of a symmetric positive (semi)definite matrix via Cholesky.
///
/// A plain factorization is attempted first. On failure the diagonal is
/// shifted by 1e-9 * mean(diag), then 1e-6 * mean(diag); if that still
/// fails an Error(NotPositiveDefinite) is thrown. A failure here usually
/// means the chart Jacobian has lost rank.
CholeskyResult cholesky_logdet(const Matrix& g);

// ---------------------------------------------------------------------------
// Conjugate gradients
// ---------------------------------------------------------------------------

/// Matrix-free symmetric positive semidefinite operator.
struct SpdOperator {
  int dim = 0;
  std::function<Vector(const Vector&)> apply;
};

struct CgOptions {
  double tol = 1e-3;
  int max_iter = 0;  // 0 selects 5 * dim
};

struct CgResult {
  Vector x;
  int iters = 0;
  bool converged = false;
  std::vector<double> residual_norms;  // ||b - A x_k|| for k = 0..iters
};

/// Unpreconditioned CG from x0 = 0. Stops when ||r|| <= tol * ||b||.
/// Throws Error(Breakdown) when p^T A p <= 0.
CgResult cg_solve(const SpdOperator& a, const Vector& b,
                  const CgOptions& options = {});

inline constexpr const char* kCgPreconditioner = "none";

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

/// Seeded generator. Independent component streams are derived with split(),
/// which hashes (seed, stream) through splitmix64 so that sibling streams do
/// not share state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }
  Rng split(std::uint64_t stream) const;

  std::uint64_t next_u64() { return engine_(); }
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal();
  std::size_t index(std::size_t n);  // uniform in [0, n)

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

  static constexpr const char* algorithm() { return "mt19937_64+splitmix64"; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

std::uint64_t splitmix64(std::uint64_t x);

/// Vector of i.i.d. standard normal entries.
Vector gaussian_probe(Rng& rng, int dim);

}  // namespace cmf::linalg
