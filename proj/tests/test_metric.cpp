#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include <Eigen/Eigenvalues>

#include "cmf/error.hpp"
#include "cmf/metric.hpp"
#include "test_support.hpp"

using namespace cmf;
using injective::InjectiveFlow;
using linalg::Matrix;
using linalg::Vector;
using testing::random_injective;
using testing::random_vector;

namespace {

// A chart whose f-part is linear: single-layer couplings whose only nonzero
// parameters are output biases of the scale and shift nets.
InjectiveFlow scaled_identity(int d, int D, const Vector& log_scales_f) {
  injective::InjectiveSpec spec;
  spec.latent_dim = d;
  spec.data_dim = D;
  spec.h.couplings = 2;
  spec.h.hidden = {};
  spec.f.couplings = 2;
  spec.f.hidden = {};
  auto gf = InjectiveFlow::build(spec);
  linalg::Rng rng(1);
  gf.init_identity(rng);
  std::vector<double> p = gf.params();
  // With no hidden layers each net is a single linear layer: W (out x in) then b.
  std::size_t off = gf.h().param_count();
  for (const auto& layer : gf.f().layers()) {
    const auto& c = std::get<flownet::AffineCoupling>(layer);
    const int in = static_cast<int>(c.pass_idx.size());
    const int out = static_cast<int>(c.trans_idx.size());
    for (int k = 0; k < out; ++k) {
      const double s = log_scales_f[c.trans_idx[k]];
      p[off + in * out + k] = 5.0 * std::atanh(s / 5.0);
    }
    off += 2 * (in * out + out);
  }
  gf.set_params(p);
  return gf;
}

}  // namespace

TEST_CASE("metric_tensor hand values") {
  Matrix j(3, 2);
  j << 1, 1, 0, 1, 0, 0;
  const auto g = metric::metric_tensor(j);
  Matrix expect(2, 2);
  expect << 1, 1, 1, 2;
  CHECK(g.g == expect);
  Matrix eye = Matrix::Zero(3, 2);
  eye.topRows(2).setIdentity();
  CHECK(metric::metric_tensor(eye).g == Matrix::Identity(2, 2));
}

TEST_CASE("metric_tensor matches a brute-force double loop") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const int D = 3 + seed % 4, d = 1 + seed % 3;
    Matrix j(D, d);
    for (int c = 0; c < d; ++c) j.col(c) = random_vector(D, seed * 10 + c);
    const auto g = metric::metric_tensor(j);
    for (int a = 0; a < d; ++a) {
      for (int b = 0; b < d; ++b) {
        double s = 0.0;
        for (int k = 0; k < D; ++k) s += j(k, a) * j(k, b);
        CHECK(std::abs(g.g(a, b) - s) < 1e-12);
      }
    }
    CHECK((g.g - g.g.transpose()).norm() == 0.0);
    Eigen::SelfAdjointEigenSolver<Matrix> es(g.g);
    CHECK(es.eigenvalues().minCoeff() > -1e-12);
  }
}

TEST_CASE("offdiag_l1 hand values") {
  CHECK(metric::offdiag_l1(Matrix(Matrix::Identity(3, 3))) == 0.0);
  Matrix a(2, 2), b(2, 2);
  a << 1, 0.5, 0.5, 2;
  b << 1, 1, 1, 2;
  CHECK(metric::offdiag_l1(a) == 1.0);
  CHECK(metric::offdiag_l1(b) == 2.0);
}

TEST_CASE("offdiag_l1 zero iff orthogonal columns iff macs zero") {
  Matrix ortho(3, 2);
  ortho << 2, 0, 0, 3, 0, 0;
  CHECK(metric::offdiag_l1(metric::metric_tensor(ortho)) == 0.0);
  CHECK(metric::macs(ortho) == 0.0);
  Matrix skew(3, 2);
  skew << 2, 0.1, 0, 3, 0, 0;
  CHECK(metric::offdiag_l1(metric::metric_tensor(skew)) > 0.0);
  CHECK(metric::macs(skew) > 0.0);
}

TEST_CASE("jacobian matches finite differences and is [I;0] at identity") {
  const auto id = testing::identity_injective(2, 4);
  Matrix expect = Matrix::Zero(4, 2);
  expect.topRows(2).setIdentity();
  CHECK(metric::jacobian(id, random_vector(2, 1)) == expect);

  for (int D = 2; D <= 6; D += 2) {
    const auto gf = random_injective(2, D, 30 + D, 0.4);
    const Vector z = random_vector(2, D);
    const Matrix jfd = testing::fd_jacobian([&](const Vector& v) { return gf.embed(v); }, z);
    CHECK((metric::jacobian(gf, z) - jfd).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("batched jacobians agree with single-point jacobian") {
  const auto gf = random_injective(3, 5, 4, 0.4);
  Matrix z(4, 3);
  for (int i = 0; i < 4; ++i) z.row(i) = random_vector(3, i).transpose();
  const auto js = metric::jacobians(gf, z);
  for (int i = 0; i < 4; ++i) CHECK((js[i] - metric::jacobian(gf, z.row(i).transpose())).norm() < 1e-14);
}

TEST_CASE("composite half log-det splits into logdet_h plus the f-part") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto gf = random_injective(2, 4, 500 + seed, 0.4);
    const Vector z = random_vector(2, seed);
    const double composite = metric::half_logdet_exact(metric::metric_tensor(metric::jacobian(gf, z)));
    const auto [zt, logdet_h] = gf.h().forward(z);
    Matrix jf(4, 2);
    for (int i = 0; i < 2; ++i) {
      Vector padded = Vector::Zero(4), tan = Vector::Zero(4);
      padded.head(2) = zt;
      tan[i] = 1.0;
      jf.col(i) = gf.f().jvp(padded, tan);
    }
    const double fpart = metric::half_logdet_exact(metric::metric_tensor(jf));
    CHECK(std::abs(composite - (logdet_h + fpart)) < 1e-8);
  }
}

TEST_CASE("half_logdet_exact closed forms") {
  CHECK(metric::half_logdet_exact({Matrix::Identity(3, 3), {}}) == doctest::Approx(0.0));
  // J with singular values 2 and 3.
  Matrix j = Matrix::Zero(3, 2);
  j(0, 0) = 2.0;
  j(1, 1) = 3.0;
  CHECK(metric::half_logdet_exact(metric::metric_tensor(j)) == doctest::Approx(std::log(6.0)).epsilon(1e-14));
  // Rotated: same singular values.
  const Matrix q = Eigen::HouseholderQR<Matrix>(Matrix::Random(3, 3)).householderQ();
  CHECK(metric::half_logdet_exact(metric::metric_tensor(q * j)) == doctest::Approx(std::log(6.0)).epsilon(1e-12));
}

TEST_CASE("linear chart with known scales") {
  const Vector s = Eigen::Vector3d(std::log(2.0), std::log(3.0), 0.4);
  const auto gf = scaled_identity(2, 3, s);
  const Matrix j = metric::jacobian(gf, random_vector(2, 1));
  CHECK(std::abs(j(0, 0) - 2.0) < 1e-12);
  CHECK(std::abs(j(1, 1) - 3.0) < 1e-12);
  CHECK(std::abs(metric::half_logdet_exact(metric::metric_tensor(j)) - std::log(6.0)) < 1e-12);
}

TEST_CASE("offdiag_l1_grad matches finite differences") {
  auto gf = random_injective(2, 3, 21, 0.5);
  REQUIRE(gf.param_count() <= 300);
  const Vector z = random_vector(2, 5);
  const auto g = metric::offdiag_l1_grad(gf, z);
  const auto fd = testing::fd_gradient(
      [&](std::span<const double> p) {
        auto m = gf;
        m.set_params(p);
        return metric::offdiag_l1(metric::metric_tensor(metric::jacobian(m, z)));
      },
      gf.params());
  const auto check = testing::compare_gradients(g, fd, 1e-3, 1e-6, 1e-7);
  CHECK(check.checked > 10);
  CHECK_MESSAGE(check.ok, check.report);
}

TEST_CASE("offdiag_l1_grad is zero at identity and for d = 1") {
  const auto id = testing::identity_injective(2, 3);
  for (double v : metric::offdiag_l1_grad(id, random_vector(2, 1))) CHECK(v == 0.0);
  const auto one = random_injective(1, 3, 3, 0.4);
  for (double v : metric::offdiag_l1_grad(one, random_vector(1, 1))) CHECK(v == 0.0);
}

TEST_CASE("half_logdet_grad_exact matches finite differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto gf = random_injective(2, 4, 600 + seed, 0.4);
    const Vector z = random_vector(2, seed);
    const auto g = metric::half_logdet_grad_exact(gf, z);
    const auto fd = testing::fd_gradient(
        [&](std::span<const double> p) {
          auto m = gf;
          m.set_params(p);
          return metric::half_logdet_exact(metric::metric_tensor(metric::jacobian(m, z)));
        },
        gf.params());
    const auto check = testing::compare_gradients(g, fd, 1e-4);
    CHECK_MESSAGE(check.ok, check.report);
  }
}

TEST_CASE("stochastic estimator at identity init") {
  const auto gf = testing::identity_injective(3, 5);
  const Vector z = random_vector(3, 1);
  metric::EstimatorConfig cfg{1, 1e-3, metric::EstimatorMode::Stochastic};
  linalg::Rng rng(2);
  const auto exact = metric::half_logdet_grad_exact(gf, z);
  const std::size_t n = exact.size();
  const int draws = 4000;
  Vector sum = Vector::Zero(n), sq = Vector::Zero(n);
  for (int t = 0; t < draws; ++t) {
    const auto est = metric::half_logdet_grad_stochastic(gf, z, cfg, rng);
    CHECK(est.converged);
    CHECK(est.cg_iterations == 1);  // J^T J = I
    const Vector g = Eigen::Map<const Vector>(est.grad.data(), n);
    sum += g;
    sq += g.cwiseProduct(g);
  }
  const Vector mean = sum / draws;
  const Vector var = sq / draws - mean.cwiseProduct(mean);
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(std::abs(mean[i] - exact[i]) < 5.0 * std::sqrt(var[i] / draws) + 1e-12);
  }
}

TEST_CASE("jtj_operator applies J^T J") {
  const auto gf = random_injective(3, 5, 8, 0.4);
  const Vector z = random_vector(3, 2);
  const Matrix j = metric::jacobian(gf, z);
  const auto op = metric::jtj_operator(gf, z);
  const Vector v = random_vector(3, 9);
  CHECK((op.apply(v) - j.transpose() * j * v).norm() < 1e-12);
}

TEST_CASE("stochastic estimator is unbiased with ~1/K variance") {
  const auto gf = random_injective(3, 5, 41, 0.3);
  const Vector z = random_vector(3, 3);
  const auto exact = metric::half_logdet_grad_exact(gf, z);
  const std::size_t n = exact.size();

  auto moments = [&](int probes, int draws, std::uint64_t seed) {
    metric::EstimatorConfig cfg{probes, 1e-10, metric::EstimatorMode::Stochastic};
    linalg::Rng rng(seed);
    Vector sum = Vector::Zero(n), sq = Vector::Zero(n);
    for (int t = 0; t < draws; ++t) {
      const auto est = metric::half_logdet_grad_stochastic(gf, z, cfg, rng);
      const Vector g = Eigen::Map<const Vector>(est.grad.data(), n);
      sum += g;
      sq += g.cwiseProduct(g);
    }
    const Vector mean = sum / draws;
    return std::pair{mean, Vector(sq / draws - mean.cwiseProduct(mean))};
  };

  const auto [mean1, var1] = moments(1, 2000, 7);
  const auto [mean10, var10] = moments(10, 2000, 8);
  double ratio_sum = 0.0;
  int counted = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (std::abs(exact[i]) > 1e-3) {
      const double se = std::sqrt(var1[i] / 2000.0);
      CHECK(std::abs(mean1[i] - exact[i]) < 5.0 * se + 1e-9);
    }
    if (var1[i] > 1e-10) {
      ratio_sum += var10[i] / var1[i];
      ++counted;
    }
  }
  REQUIRE(counted > 0);
  const double ratio = ratio_sum / counted;
  CHECK(ratio > 0.05);
  CHECK(ratio < 0.15);
}

TEST_CASE("estimator config validation") {
  CHECK_THROWS_AS(metric::validate({0, 1e-3, metric::EstimatorMode::Exact}), Error);
  CHECK_THROWS_AS(metric::validate({1, 0.0, metric::EstimatorMode::Exact}), Error);
  CHECK(metric::estimator_mode_from_string("stochastic") == metric::EstimatorMode::Stochastic);
  CHECK_THROWS_AS(metric::estimator_mode_from_string("approx"), Error);
  const auto gf = testing::identity_injective(2, 3);
  linalg::Rng rng(1);
  CHECK_THROWS_AS(metric::half_logdet_grad_stochastic(gf, Vector::Zero(2), {}, rng), Error);
}

TEST_CASE("macs hand values") {
  Matrix ortho = Matrix::Identity(3, 3);
  CHECK(metric::macs(ortho) == 0.0);
  Matrix dup(2, 2);
  dup << 1, 1, 2, 2;
  CHECK(metric::macs(dup) == doctest::Approx(1.0));
  Matrix c(2, 2);
  c << 1, 1.0 / std::sqrt(2.0), 0, 1.0 / std::sqrt(2.0);
  CHECK(metric::macs(c) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-14));
  Matrix collapsed(2, 3);
  collapsed << 1, 0, 1, 0, 0, 1;
  CHECK(metric::macs(collapsed) == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(metric::macs(Matrix::Zero(3, 2)) == 0.0);
  const Matrix cos = metric::abs_cosine_matrix(c);
  CHECK(cos(0, 1) == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(cos(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("diag_profile closed forms") {
  const auto id = testing::identity_injective(3, 4);
  Matrix z(10, 3);
  for (int i = 0; i < 10; ++i) z.row(i) = random_vector(3, i).transpose();
  const Vector p = metric::diag_profile(z, id);
  CHECK((p - Vector::Ones(3)).norm() < 1e-14);

  // Scale 2, (numerically) 0, 1 on the latent coordinates.
  const auto gf = scaled_identity(3, 4, Eigen::Vector4d(std::log(2.0), -4.99, 0.0, 0.0));
  const Vector q = metric::diag_profile(z, gf);
  CHECK(q[0] == doctest::Approx(4.0));
  CHECK(q[1] == doctest::Approx(std::exp(-2 * 4.99)));
  CHECK(q[2] == doctest::Approx(1.0));

  CHECK_THROWS_AS(metric::diag_profile(Matrix(0, 3), id), Error);
}

TEST_CASE("diag_profile is permutation-equivariant") {
  const Vector s(Eigen::Vector4d(0.3, -0.5, 0.9, 0.0));
  const auto gf = scaled_identity(3, 4, s);
  Vector sp = s;
  sp[0] = s[2];
  sp[2] = s[0];
  const auto gp = scaled_identity(3, 4, sp);
  Matrix z(6, 3);
  for (int i = 0; i < 6; ++i) z.row(i) = random_vector(3, 50 + i).transpose();
  const Vector a = metric::diag_profile(z, gf);
  const Vector b = metric::diag_profile(z, gp);
  CHECK(a[0] == doctest::Approx(b[2]));
  CHECK(a[2] == doctest::Approx(b[0]));
  CHECK(a[1] == doctest::Approx(b[1]));
}
