#include "cmf/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "cmf/error.hpp"
#include "cmf/training.hpp"
#include "json.hpp"

namespace cmf::evalkit {

GaussianMoments moments(const Matrix& x) {
  if (x.rows() < 2) throw Error(ErrorCode::InvalidArgument, "moments: need at least 2 samples");
  GaussianMoments m;
  m.mu = x.colwise().mean().transpose();
  const Matrix c = x.rowwise() - m.mu.transpose();
  m.sigma = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
  m.sigma = 0.5 * (m.sigma + m.sigma.transpose()).eval();
  return m;
}

namespace {

constexpr double kNegativeFloor = -1e-8;

Vector clamped_eigenvalues(const Eigen::SelfAdjointEigenSolver<Matrix>& es, const char* what) {
  Vector ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < kNegativeFloor) {
      throw Error(ErrorCode::MomentDegeneracy,
                  std::string(what) + ": eigenvalue " + std::to_string(ev[i]) + " is negative");
    }
    ev[i] = std::max(ev[i], 0.0);
  }
  return ev;
}

}  // namespace

Matrix psd_sqrt(const Matrix& s) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (s + s.transpose()));
  const Vector ev = clamped_eigenvalues(es, "psd_sqrt");
  return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

double fid_like(const GaussianMoments& a, const GaussianMoments& b) {
  if (a.mu.size() != b.mu.size() || a.sigma.rows() != b.sigma.rows()) {
    throw Error(ErrorCode::DimensionMismatch, "fid_like: moment dimensions differ");
  }
  const Matrix root = psd_sqrt(a.sigma);
  Matrix inner = root * b.sigma * root;
  inner = 0.5 * (inner + inner.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Matrix> es(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = clamped_eigenvalues(es, "fid_like").cwiseSqrt().sum();
  const double d = (a.mu - b.mu).squaredNorm() + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_sqrt;
  if (d < 0.0 && d > kNegativeFloor) return 0.0;
  return d;
}

Vector loglik_rows(const InjectiveFlow& gf, const Matrix& x, int threads) {
  return training::sample_terms(gf, x, false, threads).log_likelihood();
}

double mean_loglik(const InjectiveFlow& gf, const Matrix& x, int threads) {
  const Vector ll = loglik_rows(gf, x, threads);
  double s = 0.0;
  for (Eigen::Index i = 0; i < ll.size(); ++i) s += ll[i];
  return s / static_cast<double>(ll.size());
}

std::vector<int> prominent_dims(const Vector& profile, int k) {
  const int d = static_cast<int>(profile.size());
  if (k < 1 || k > d) throw Error(ErrorCode::InvalidArgument, "prominent_dims: need 1 <= k <= d");
  std::vector<int> idx(d);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return std::abs(profile[a]) > std::abs(profile[b]); });
  idx.resize(k);
  return idx;
}

Matrix restricted_latent(int d, const std::vector<int>& dims, Eigen::Index n, linalg::Rng& rng) {
  std::vector<bool> keep(d, false);
  for (int k : dims) {
    if (k < 0 || k >= d) throw Error(ErrorCode::InvalidArgument, "restricted_sample: dimension out of range");
    keep[k] = true;
  }
  Matrix z(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      const double v = rng.normal();
      z(i, j) = keep[j] ? v : 0.0;
    }
  }
  return z;
}

Matrix restricted_sample(const InjectiveFlow& gf, const std::vector<int>& dims, Eigen::Index n,
                         linalg::Rng& rng) {
  return gf.embed_rows(restricted_latent(gf.latent_dim(), dims, n, rng));
}

StumpResult ood_stump(const std::vector<double>& loglik_in, const std::vector<double>& loglik_out) {
  if (loglik_in.empty() || loglik_out.empty()) {
    throw Error(ErrorCode::InvalidArgument, "ood_stump: both lists must be nonempty");
  }
  struct Item {
    double v;
    bool in;
  };
  std::vector<Item> items;
  items.reserve(loglik_in.size() + loglik_out.size());
  for (double v : loglik_in) items.push_back({v, true});
  for (double v : loglik_out) items.push_back({v, false});
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.v < b.v; });

  const double n_in = static_cast<double>(loglik_in.size());
  const double n_out = static_cast<double>(loglik_out.size());
  // Threshold below everything: all predicted in.
  StumpResult best{-std::numeric_limits<double>::infinity(), 0.5};
  double in_below = 0.0, out_below = 0.0;  // counts with value <= threshold (predicted out)
  for (std::size_t i = 0; i < items.size();) {
    std::size_t j = i;
    while (j < items.size() && items[j].v == items[i].v) {
      (items[j].in ? in_below : out_below) += 1.0;
      ++j;
    }
    const double acc = 0.5 * ((n_in - in_below) / n_in + out_below / n_out);
    const double t = j < items.size() ? 0.5 * (items[i].v + items[j].v) : items[i].v;
    if (acc > best.accuracy) best = {t, acc};
    i = j;
  }
  return best;
}

std::vector<int> default_sweep_sizes(int d) {
  std::vector<int> ks;
  for (int k : {1, 8, 16, 24, 32, 40}) {
    if (k <= d) ks.push_back(k);
  }
  if (ks.empty() || ks.back() != d) ks.push_back(d);
  return ks;
}

std::vector<SweepPoint> prominent_sweep(const InjectiveFlow& gf, const Matrix& x, const Vector& profile,
                                        const std::vector<int>& ks, linalg::Rng& rng) {
  const GaussianMoments data = moments(x);
  const Matrix z = gf.project_rows(x);
  std::vector<SweepPoint> out;
  for (int k : ks) {
    SweepPoint p;
    p.k = k;
    p.dims = prominent_dims(profile, k);
    linalg::Rng sample_rng = rng.split(static_cast<std::uint64_t>(k));
    p.fid_like = fid_like(data, moments(restricted_sample(gf, p.dims, x.rows(), sample_rng)));
    Matrix zr = Matrix::Zero(z.rows(), z.cols());
    for (int j : p.dims) zr.col(j) = z.col(j);
    p.mse = (x - gf.embed_rows(zr)).rowwise().squaredNorm().mean();
    out.push_back(std::move(p));
  }
  return out;
}

std::string to_json(const EvalReport& r, int indent) {
  nlohmann::ordered_json j;
  j["fid_like"] = r.fid_like;
  j["mean_loglik"] = r.mean_loglik;
  j["macs"] = r.macs;
  j["diag_profile"] = std::vector<double>(r.diag_profile.data(), r.diag_profile.data() + r.diag_profile.size());
  j["prominent_order"] = r.prominent_order;
  return j.dump(indent);
}

}  // namespace cmf::evalkit
