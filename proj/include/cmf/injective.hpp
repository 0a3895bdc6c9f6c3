#pragma once

// Injective flow x = f(pad(h(z))) from R^d into R^D, with its left inverse
// z = h^-1(slice(f^-1(x))).

#include <span>
#include <vector>

#include "cmf/flownet.hpp"

namespace cmf::injective {

using flownet::FlowModule;
using flownet::ParamGrad;
using flownet::Tangents;
using linalg::Matrix;
using linalg::Vector;

/// Standard normal over R^d.
struct LatentPrior {
  int dim = 0;
  double log_density(const Vector& z) const;
  Vector log_density_rows(const Matrix& z) const;
};

struct InjectiveSpec {
  int latent_dim = 2;  // d
  int data_dim = 3;    // D
  flownet::FlowSpec h;  // dim is overwritten with d
  flownet::FlowSpec f;  // dim is overwritten with D
};

/// Forward pass through the whole chart with two families of tangent seeds:
/// `h_seeds` enter at z (giving columns of the composite Jacobian dx/dz) and
/// `f_seeds` enter at z~ = h(z) (giving columns of d f(pad(.)) / d z~).
/// Output tangents are ordered h-seeded first, then f-seeded.
struct ChartPass {
  flownet::FlowPass h;
  flownet::FlowPass f;
  std::size_t h_seed_count = 0;
  const Matrix& x() const { return f.out; }
  const Vector& logdet_h() const { return h.logdet; }
  const Tangents& tangents() const { return f.tangents; }
};

struct ProjectPass {
  flownet::InversePass f;
  flownet::InversePass h;
  const Matrix& z() const { return h.out; }
};

class InjectiveFlow {
 public:
  InjectiveFlow() = default;
  InjectiveFlow(int latent_dim, FlowModule h, FlowModule f);

  static InjectiveFlow build(const InjectiveSpec& spec);

  int latent_dim() const { return d_; }
  int data_dim() const { return D_; }
  const FlowModule& h() const { return h_; }
  const FlowModule& f() const { return f_; }
  FlowModule& h() { return h_; }
  FlowModule& f() { return f_; }

  /// Parameter layout: [h params | f params].
  std::size_t param_count() const { return h_.param_count() + f_.param_count(); }
  std::vector<double> params() const;
  void set_params(std::span<const double> p);
  void init_identity(linalg::Rng& rng);

  Matrix pad(const Matrix& z) const;
  Matrix slice(const Matrix& x) const;

  ChartPass chart_forward(const Matrix& z, const Tangents& h_seeds, const Tangents& f_seeds) const;
  /// Returns dz; parameter cotangents are accumulated into `grad` unless it
  /// is empty.
  Matrix chart_reverse(const ChartPass& pass, const Matrix& x_bar, const Tangents& tangent_bar,
                       const Vector& logdet_h_bar, std::span<double> grad) const;

  ProjectPass project_pass(const Matrix& x) const;
  void project_reverse(const ProjectPass& pass, const Matrix& z_bar, std::span<double> grad) const;

  // Batched primal maps.
  Matrix embed_rows(const Matrix& z) const;
  Matrix project_rows(const Matrix& x) const;

  // Single-point operations.
  Vector embed(const Vector& z) const;
  Vector project(const Vector& x) const;
  struct Reconstruction {
    Vector x_hat;
    double sq_err = 0.0;
  };
  Reconstruction reconstruct(const Vector& x) const;
  Vector rect_jvp(const Vector& z, const Vector& v) const;
  struct RectVjp {
    Vector v;
    ParamGrad dparams;
  };
  RectVjp rect_vjp(const Vector& z, const Vector& u) const;

 private:
  std::span<double> h_grad(std::span<double> grad) const {
    return grad.empty() ? grad : grad.subspan(0, h_.param_count());
  }
  std::span<double> f_grad(std::span<double> grad) const {
    return grad.empty() ? grad : grad.subspan(h_.param_count(), f_.param_count());
  }

  int d_ = 0;
  int D_ = 0;
  FlowModule h_;
  FlowModule f_;
};

/// Identity seeds e_0 .. e_{dim-1}, each an n x dim matrix.
Tangents basis_seeds(Eigen::Index rows, int dim);

/// Row r of a set of tangents, assembled as a (tangent width) x (count) matrix.
Matrix jacobian_row(const Tangents& tangents, Eigen::Index row, std::size_t first, std::size_t count);

}  // namespace cmf::injective
