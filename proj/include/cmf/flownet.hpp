#pragma once

// Affine-coupling flows with hand-written forward/reverse derivatives.
//
// Everything is batched: a batch of n points is an n x dim matrix (one point
// per row). A forward pass may carry any number of tangent directions
// alongside the primal values (forward mode). The matching reverse pass takes
// cotangents for the primal output, for every output tangent and for the
// per-row log-det, and returns cotangents for the input and every input
// tangent while accumulating parameter cotangents. Reverse over a tangent
// pass is what gives second-order quantities such as d/dtheta (J v).

#include <cstddef>
#include <span>
#include <utility>
#include <variant>
#include <vector>

#include "cmf/linalg.hpp"

namespace cmf::flownet {

using linalg::Matrix;
using linalg::Vector;
using Tangents = std::vector<Matrix>;

/// Flat parameter cotangent, aligned with a flow's parameter vector.
using ParamGrad = std::vector<double>;

// ---------------------------------------------------------------------------
// Mlp
// ---------------------------------------------------------------------------

/// tanh MLP with a linear output layer. Parameters live in an external flat
/// buffer starting at `offset`; layer l stores W_l (row-major, out x in)
/// followed by b_l.
struct Mlp {
  std::vector<int> widths;
  std::size_t offset = 0;

  std::size_t param_count() const;
  int in_dim() const { return widths.front(); }
  int out_dim() const { return widths.back(); }

  struct Tape {
    std::vector<Matrix> act;                 // act[0] = input, act[l] = layer l output
    std::vector<Tangents> act_tan;           // tangents of act[l]
    std::vector<Tangents> pre_tan;           // tangents of pre-activations (hidden layers)
  };

  Matrix forward(std::span<const double> params, const Matrix& in, const Tangents& in_tan,
                 Tangents& out_tan, Tape* tape) const;

  void reverse(std::span<const double> params, const Tape& tape, Matrix out_bar,
               Tangents out_tan_bar, std::span<double> grad, Matrix& in_bar,
               Tangents& in_tan_bar) const;

  void init(std::span<double> params, linalg::Rng& rng) const;
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// y_a = x_a, y_b = x_b * exp(s(x_a)) + t(x_a), with s clamped as
/// clamp * tanh(s_raw / clamp).
struct AffineCoupling {
  int dim = 0;
  std::vector<bool> mask;        // true = passes through unchanged
  std::vector<int> pass_idx;
  std::vector<int> trans_idx;
  Mlp scale_net;
  Mlp shift_net;
  double scale_clamp = 5.0;

  std::size_t param_count() const { return scale_net.param_count() + shift_net.param_count(); }
};

/// Fixed coordinate permutation: y[:, j] = x[:, perm[j]].
struct Permutation {
  std::vector<int> perm;
};

using Layer = std::variant<AffineCoupling, Permutation>;

struct CouplingTape {
  Matrix input;
  Tangents in_tan;
  Mlp::Tape scale_tape, shift_tape;
  Matrix s;       // clamped log-scale, n x |b|
  Matrix e;       // exp(s)
  Tangents s_raw_tan, s_tan;
};

struct CouplingInverseTape {
  Matrix output_b;  // transformed coordinates of the inverse output
  Mlp::Tape scale_tape, shift_tape;
  Matrix s;
  Matrix e_neg;  // exp(-s)
};

using LayerTape = std::variant<CouplingTape, std::monostate>;
using LayerInverseTape = std::variant<CouplingInverseTape, std::monostate>;

// ---------------------------------------------------------------------------
// FlowModule
// ---------------------------------------------------------------------------

struct FlowSpec {
  int dim = 0;
  int couplings = 4;
  std::vector<int> hidden{32, 32};
  double scale_clamp = 5.0;
};

struct FlowPass {
  Matrix out;
  Vector logdet;   // per row
  Tangents tangents;
  std::vector<LayerTape> tape;
};

struct FlowCotangents {
  Matrix input;
  Tangents tangents;
};

struct InversePass {
  Matrix out;
  Vector logdet;  // per row, log|det d(out)/d(in)| of the inverse map
  std::vector<LayerInverseTape> tape;
};

class FlowModule {
 public:
  FlowModule() = default;

  /// Alternating even/odd coupling masks. A flow of dimension 1 has no
  /// couplings and is the identity.
  static FlowModule build(const FlowSpec& spec);
  static FlowModule from_layers(int dim, std::vector<Layer> layers);

  int dim() const { return dim_; }
  std::size_t param_count() const { return params_.size(); }
  std::span<const double> params() const { return params_; }
  std::span<double> params() { return params_; }
  void set_params(std::span<const double> p);
  const std::vector<Layer>& layers() const { return layers_; }

  /// Hidden layers Kaiming-uniform, output layers zero: the flow starts as
  /// the identity.
  void init_identity(linalg::Rng& rng);

  FlowPass forward_pass(const Matrix& z, const Tangents& tangents) const;
  FlowCotangents reverse(const FlowPass& pass, const Matrix& out_bar,
                         const Tangents& tangent_bar, const Vector& logdet_bar,
                         std::span<double> grad) const;

  InversePass inverse_pass(const Matrix& x) const;
  Matrix reverse_inverse(const InversePass& pass, const Matrix& out_bar,
                         std::span<double> grad) const;

  // Single-point conveniences.
  std::pair<Vector, double> forward(const Vector& z) const;
  std::pair<Vector, double> inverse(const Vector& x) const;
  Vector jvp(const Vector& z, const Vector& v) const;
  std::pair<Vector, ParamGrad> vjp(const Vector& z, const Vector& u) const;
  ParamGrad grad_logdet_params(const Vector& z) const;

 private:
  int dim_ = 0;
  std::vector<Layer> layers_;
  std::vector<double> params_;
};

/// Throws Error(NonFinite) if any entry is NaN/inf.
void check_finite(const Matrix& m, const char* where);

}  // namespace cmf::flownet
