#include "cmf/injective.hpp"

#include <cmath>
#include <numbers>

#include "cmf/error.hpp"

namespace cmf::injective {

double LatentPrior::log_density(const Vector& z) const {
  return -0.5 * z.squaredNorm() - 0.5 * dim * std::log(2.0 * std::numbers::pi);
}

Vector LatentPrior::log_density_rows(const Matrix& z) const {
  const double c = -0.5 * dim * std::log(2.0 * std::numbers::pi);
  return (-0.5 * z.rowwise().squaredNorm()).array() + c;
}

InjectiveFlow::InjectiveFlow(int latent_dim, FlowModule h, FlowModule f)
    : d_(latent_dim), D_(f.dim()), h_(std::move(h)), f_(std::move(f)) {
  if (d_ < 1 || h_.dim() != d_) {
    throw Error(ErrorCode::InvalidArgument, "InjectiveFlow: h must act on the latent dimension");
  }
  if (d_ > D_) throw Error(ErrorCode::InvalidArgument, "InjectiveFlow: latent dim exceeds data dim");
}

InjectiveFlow InjectiveFlow::build(const InjectiveSpec& spec) {
  if (spec.latent_dim < 1 || spec.latent_dim > spec.data_dim) {
    throw Error(ErrorCode::InvalidArgument, "InjectiveFlow: need 1 <= d <= D");
  }
  flownet::FlowSpec hs = spec.h;
  flownet::FlowSpec fs = spec.f;
  hs.dim = spec.latent_dim;
  fs.dim = spec.data_dim;
  return InjectiveFlow(spec.latent_dim, FlowModule::build(hs), FlowModule::build(fs));
}

std::vector<double> InjectiveFlow::params() const {
  std::vector<double> p;
  p.reserve(param_count());
  p.insert(p.end(), h_.params().begin(), h_.params().end());
  p.insert(p.end(), f_.params().begin(), f_.params().end());
  return p;
}

void InjectiveFlow::set_params(std::span<const double> p) {
  if (p.size() != param_count()) {
    throw Error(ErrorCode::DimensionMismatch, "InjectiveFlow::set_params: wrong parameter count");
  }
  h_.set_params(p.subspan(0, h_.param_count()));
  f_.set_params(p.subspan(h_.param_count()));
}

void InjectiveFlow::init_identity(linalg::Rng& rng) {
  linalg::Rng h_rng = rng.split(1);
  linalg::Rng f_rng = rng.split(2);
  h_.init_identity(h_rng);
  f_.init_identity(f_rng);
}

Matrix InjectiveFlow::pad(const Matrix& z) const {
  Matrix x = Matrix::Zero(z.rows(), D_);
  x.leftCols(d_) = z;
  return x;
}

Matrix InjectiveFlow::slice(const Matrix& x) const { return x.leftCols(d_); }

ChartPass InjectiveFlow::chart_forward(const Matrix& z, const Tangents& h_seeds,
                                       const Tangents& f_seeds) const {
  if (z.cols() != d_) throw Error(ErrorCode::DimensionMismatch, "chart_forward: z width != d");
  ChartPass pass;
  pass.h_seed_count = h_seeds.size();
  pass.h = h_.forward_pass(z, h_seeds);
  Tangents padded;
  padded.reserve(h_seeds.size() + f_seeds.size());
  for (const auto& t : pass.h.tangents) padded.push_back(pad(t));
  for (const auto& t : f_seeds) {
    if (t.cols() != d_ || t.rows() != z.rows()) {
      throw Error(ErrorCode::DimensionMismatch, "chart_forward: f seed shape mismatch");
    }
    padded.push_back(pad(t));
  }
  pass.f = f_.forward_pass(pad(pass.h.out), padded);
  return pass;
}

Matrix InjectiveFlow::chart_reverse(const ChartPass& pass, const Matrix& x_bar,
                                    const Tangents& tangent_bar, const Vector& logdet_h_bar,
                                    std::span<double> grad) const {
  if (!grad.empty() && grad.size() != param_count()) {
    throw Error(ErrorCode::DimensionMismatch, "chart_reverse: gradient buffer has wrong size");
  }
  const Eigen::Index n = x_bar.rows();
  const auto fbar = f_.reverse(pass.f, x_bar, tangent_bar, Vector::Zero(n), f_grad(grad));
  Tangents h_tan_bar(pass.h_seed_count);
  for (std::size_t k = 0; k < pass.h_seed_count; ++k) h_tan_bar[k] = slice(fbar.tangents[k]);
  const auto hbar = h_.reverse(pass.h, slice(fbar.input), h_tan_bar, logdet_h_bar, h_grad(grad));
  return hbar.input;
}

ProjectPass InjectiveFlow::project_pass(const Matrix& x) const {
  if (x.cols() != D_) throw Error(ErrorCode::DimensionMismatch, "project: x width != D");
  ProjectPass pass;
  pass.f = f_.inverse_pass(x);
  pass.h = h_.inverse_pass(slice(pass.f.out));
  return pass;
}

void InjectiveFlow::project_reverse(const ProjectPass& pass, const Matrix& z_bar,
                                    std::span<double> grad) const {
  if (grad.size() != param_count()) {
    throw Error(ErrorCode::DimensionMismatch, "project_reverse: gradient buffer has wrong size");
  }
  const Matrix zt_bar = h_.reverse_inverse(pass.h, z_bar, h_grad(grad));
  f_.reverse_inverse(pass.f, pad(zt_bar), f_grad(grad));
}

Matrix InjectiveFlow::embed_rows(const Matrix& z) const {
  if (z.cols() != d_) throw Error(ErrorCode::DimensionMismatch, "embed: z width != d");
  return f_.forward_pass(pad(h_.forward_pass(z, {}).out), {}).out;
}

Matrix InjectiveFlow::project_rows(const Matrix& x) const { return project_pass(x).h.out; }

Vector InjectiveFlow::embed(const Vector& z) const { return embed_rows(z.transpose()).row(0).transpose(); }

Vector InjectiveFlow::project(const Vector& x) const {
  return project_rows(x.transpose()).row(0).transpose();
}

InjectiveFlow::Reconstruction InjectiveFlow::reconstruct(const Vector& x) const {
  Reconstruction r;
  r.x_hat = embed(project(x));
  r.sq_err = (x - r.x_hat).squaredNorm();
  return r;
}

Vector InjectiveFlow::rect_jvp(const Vector& z, const Vector& v) const {
  if (v.size() != d_) throw Error(ErrorCode::DimensionMismatch, "rect_jvp: v size != d");
  const ChartPass pass = chart_forward(z.transpose(), {Matrix(v.transpose())}, {});
  return pass.tangents()[0].row(0).transpose();
}

InjectiveFlow::RectVjp InjectiveFlow::rect_vjp(const Vector& z, const Vector& u) const {
  if (u.size() != D_) throw Error(ErrorCode::DimensionMismatch, "rect_vjp: u size != D");
  const ChartPass pass = chart_forward(z.transpose(), {}, {});
  RectVjp out;
  out.dparams.assign(param_count(), 0.0);
  out.v = chart_reverse(pass, u.transpose(), {}, Vector::Zero(1), out.dparams).row(0).transpose();
  return out;
}

Tangents basis_seeds(Eigen::Index rows, int dim) {
  Tangents seeds(dim);
  for (int i = 0; i < dim; ++i) {
    seeds[i] = Matrix::Zero(rows, dim);
    seeds[i].col(i).setOnes();
  }
  return seeds;
}

Matrix jacobian_row(const Tangents& tangents, Eigen::Index row, std::size_t first, std::size_t count) {
  const Eigen::Index width = tangents.at(first).cols();
  Matrix j(width, static_cast<Eigen::Index>(count));
  for (std::size_t i = 0; i < count; ++i) j.col(i) = tangents[first + i].row(row).transpose();
  return j;
}

}  // namespace cmf::injective
