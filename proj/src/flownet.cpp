#include "cmf/flownet.hpp"

#include <cmath>
#include <string>

#include "cmf/error.hpp"

namespace cmf::flownet {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstWeights = Eigen::Map<const RowMajor>;
using Weights = Eigen::Map<RowMajor>;
using ConstBias = Eigen::Map<const Eigen::VectorXd>;
using Bias = Eigen::Map<Eigen::VectorXd>;

}  // namespace

void check_finite(const Matrix& m, const char* where) {
  if (!m.allFinite()) {
    throw Error(ErrorCode::NonFinite,
                std::string(where) + ": non-finite values (learning rate or scale clamp too large?)");
  }
}

// ---------------------------------------------------------------------------
// Mlp
// ---------------------------------------------------------------------------

std::size_t Mlp::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 1; l < widths.size(); ++l) {
    n += static_cast<std::size_t>(widths[l]) * widths[l - 1] + widths[l];
  }
  return n;
}

Matrix Mlp::forward(std::span<const double> params, const Matrix& in, const Tangents& in_tan,
                    Tangents& out_tan, Tape* tape) const {
  const std::size_t layers = widths.size() - 1;
  const std::size_t k_tan = in_tan.size();
  const double* p = params.data() + offset;

  Matrix a = in;
  Tangents at = in_tan;
  if (tape) {
    tape->act.assign(1, in);
    tape->act_tan.assign(1, in_tan);
    tape->pre_tan.assign(1, Tangents{});
  }
  for (std::size_t l = 1; l <= layers; ++l) {
    const int rows = widths[l];
    const int cols = widths[l - 1];
    ConstWeights w(p, rows, cols);
    p += static_cast<std::size_t>(rows) * cols;
    ConstBias b(p, rows);
    p += rows;

    Matrix pre = a * w.transpose();
    pre.rowwise() += b.transpose();
    Tangents pt(k_tan);
    for (std::size_t k = 0; k < k_tan; ++k) pt[k] = at[k] * w.transpose();

    if (l < layers) {
      a = pre.array().tanh().matrix();
      const Eigen::ArrayXXd d = 1.0 - a.array().square();
      for (std::size_t k = 0; k < k_tan; ++k) at[k] = (d * pt[k].array()).matrix();
    } else {
      a = std::move(pre);
      at = pt;
    }
    if (tape) {
      tape->act.push_back(a);
      tape->act_tan.push_back(at);
      tape->pre_tan.push_back(l < layers ? std::move(pt) : Tangents{});
    }
  }
  out_tan = std::move(at);
  return a;
}

void Mlp::reverse(std::span<const double> params, const Tape& tape, Matrix out_bar,
                  Tangents out_tan_bar, std::span<double> grad, Matrix& in_bar,
                  Tangents& in_tan_bar) const {
  const std::size_t layers = widths.size() - 1;
  const std::size_t k_tan = out_tan_bar.size();

  std::vector<std::size_t> starts(layers + 1);
  starts[1] = offset;
  for (std::size_t l = 1; l < layers; ++l) {
    starts[l + 1] = starts[l] + static_cast<std::size_t>(widths[l]) * widths[l - 1] + widths[l];
  }

  Matrix abar = std::move(out_bar);
  Tangents atbar = std::move(out_tan_bar);
  for (std::size_t l = layers; l >= 1; --l) {
    const int rows = widths[l];
    const int cols = widths[l - 1];
    ConstWeights w(params.data() + starts[l], rows, cols);

    Matrix pbar;
    Tangents ptbar(k_tan);
    if (l == layers) {
      pbar = std::move(abar);
      ptbar = std::move(atbar);
    } else {
      const Eigen::ArrayXXd act = tape.act[l].array();
      const Eigen::ArrayXXd d = 1.0 - act.square();
      Eigen::ArrayXXd pb = d * abar.array();
      if (k_tan > 0) {
        const Eigen::ArrayXXd dd = -2.0 * act * d;
        for (std::size_t k = 0; k < k_tan; ++k) {
          pb += atbar[k].array() * tape.pre_tan[l][k].array() * dd;
          ptbar[k] = (d * atbar[k].array()).matrix();
        }
      }
      pbar = pb.matrix();
    }

    if (!grad.empty()) {
      Weights gw(grad.data() + starts[l], rows, cols);
      Bias gb(grad.data() + starts[l] + static_cast<std::size_t>(rows) * cols, rows);
      gw.noalias() += pbar.transpose() * tape.act[l - 1];
      for (std::size_t k = 0; k < k_tan; ++k) {
        gw.noalias() += ptbar[k].transpose() * tape.act_tan[l - 1][k];
      }
      gb += pbar.colwise().sum().transpose();
    }

    abar = pbar * w;
    atbar.resize(k_tan);
    for (std::size_t k = 0; k < k_tan; ++k) atbar[k] = ptbar[k] * w;
  }
  in_bar = std::move(abar);
  in_tan_bar = std::move(atbar);
}

void Mlp::init(std::span<double> params, linalg::Rng& rng) const {
  const std::size_t layers = widths.size() - 1;
  double* p = params.data() + offset;
  for (std::size_t l = 1; l <= layers; ++l) {
    const int rows = widths[l];
    const int cols = widths[l - 1];
    const std::size_t nw = static_cast<std::size_t>(rows) * cols;
    const double bound = (l < layers) ? std::sqrt(6.0 / cols) : 0.0;
    for (std::size_t i = 0; i < nw; ++i) p[i] = bound > 0.0 ? rng.uniform(-bound, bound) : 0.0;
    for (int i = 0; i < rows; ++i) p[nw + i] = 0.0;
    p += nw + rows;
  }
}

// ---------------------------------------------------------------------------
// Coupling layer kernels
// ---------------------------------------------------------------------------

namespace {

Matrix coupling_forward(const AffineCoupling& c, std::span<const double> params, const Matrix& x,
                        Tangents& tangents, Vector& logdet, CouplingTape& tape) {
  const std::size_t k_tan = tangents.size();
  const double alpha = c.scale_clamp;

  const Matrix cond = x(Eigen::all, c.pass_idx);
  Tangents cond_tan(k_tan);
  for (std::size_t k = 0; k < k_tan; ++k) cond_tan[k] = tangents[k](Eigen::all, c.pass_idx);

  Tangents t_tan;
  const Matrix s_raw = c.scale_net.forward(params, cond, cond_tan, tape.s_raw_tan, &tape.scale_tape);
  const Matrix t = c.shift_net.forward(params, cond, cond_tan, t_tan, &tape.shift_tape);

  const Eigen::ArrayXXd q = (s_raw.array() / alpha).tanh();
  tape.s = (alpha * q).matrix();
  tape.e = tape.s.array().exp().matrix();
  const Eigen::ArrayXXd dq = 1.0 - q.square();

  const Matrix xb = x(Eigen::all, c.trans_idx);
  Matrix y = x;
  y(Eigen::all, c.trans_idx) = (xb.array() * tape.e.array() + t.array()).matrix();
  logdet += tape.s.rowwise().sum();

  tape.s_tan.resize(k_tan);
  for (std::size_t k = 0; k < k_tan; ++k) {
    tape.s_tan[k] = (dq * tape.s_raw_tan[k].array()).matrix();
    const Matrix xbt = tangents[k](Eigen::all, c.trans_idx);
    tangents[k](Eigen::all, c.trans_idx) =
        (xbt.array() * tape.e.array() + xb.array() * tape.e.array() * tape.s_tan[k].array() +
         t_tan[k].array())
            .matrix();
  }
  tape.input = x;
  return y;
}

void coupling_reverse(const AffineCoupling& c, std::span<const double> params,
                      const CouplingTape& tape, Matrix& bar, Tangents& tan_bar,
                      const Vector& logdet_bar, std::span<double> grad) {
  const std::size_t k_tan = tan_bar.size();
  const double alpha = c.scale_clamp;
  const Eigen::ArrayXXd e = tape.e.array();
  const Eigen::ArrayXXd xb = tape.input(Eigen::all, c.trans_idx).array();
  const Eigen::ArrayXXd yb_bar = bar(Eigen::all, c.trans_idx).array();

  Eigen::ArrayXXd xb_bar = yb_bar * e;
  Eigen::ArrayXXd s_bar = yb_bar * xb * e;
  s_bar.colwise() += logdet_bar.array();
  Tangents s_tan_bar(k_tan), t_tan_bar(k_tan), xbt_bar(k_tan);
  for (std::size_t k = 0; k < k_tan; ++k) {
    const Eigen::ArrayXXd ybt_bar = tan_bar[k](Eigen::all, c.trans_idx).array();
    const Eigen::ArrayXXd xbt = tape.in_tan[k](Eigen::all, c.trans_idx).array();
    const Eigen::ArrayXXd st = tape.s_tan[k].array();
    xb_bar += ybt_bar * e * st;
    s_bar += ybt_bar * (xbt * e + xb * e * st);
    xbt_bar[k] = (ybt_bar * e).matrix();
    s_tan_bar[k] = (ybt_bar * xb * e).matrix();
    t_tan_bar[k] = ybt_bar.matrix();
  }

  const Eigen::ArrayXXd q = tape.s.array() / alpha;
  const Eigen::ArrayXXd dq = 1.0 - q.square();
  Eigen::ArrayXXd sr_bar = dq * s_bar;
  Tangents sr_tan_bar(k_tan);
  for (std::size_t k = 0; k < k_tan; ++k) {
    sr_bar += s_tan_bar[k].array() * tape.s_raw_tan[k].array() * (-2.0 / alpha) * q * dq;
    sr_tan_bar[k] = (dq * s_tan_bar[k].array()).matrix();
  }

  Matrix cond_bar_s, cond_bar_t;
  Tangents cond_tan_bar_s, cond_tan_bar_t;
  c.scale_net.reverse(params, tape.scale_tape, sr_bar.matrix(), std::move(sr_tan_bar), grad,
                      cond_bar_s, cond_tan_bar_s);
  c.shift_net.reverse(params, tape.shift_tape, yb_bar.matrix(), std::move(t_tan_bar), grad,
                      cond_bar_t, cond_tan_bar_t);

  bar(Eigen::all, c.trans_idx) = xb_bar.matrix();
  bar(Eigen::all, c.pass_idx) += cond_bar_s + cond_bar_t;
  for (std::size_t k = 0; k < k_tan; ++k) {
    tan_bar[k](Eigen::all, c.trans_idx) = xbt_bar[k];
    tan_bar[k](Eigen::all, c.pass_idx) += cond_tan_bar_s[k] + cond_tan_bar_t[k];
  }
}

Matrix coupling_inverse(const AffineCoupling& c, std::span<const double> params, const Matrix& x,
                        Vector& logdet, CouplingInverseTape& tape) {
  const double alpha = c.scale_clamp;
  const Matrix cond = x(Eigen::all, c.pass_idx);
  Tangents none;
  const Matrix s_raw = c.scale_net.forward(params, cond, {}, none, &tape.scale_tape);
  const Matrix t = c.shift_net.forward(params, cond, {}, none, &tape.shift_tape);
  tape.s = (alpha * (s_raw.array() / alpha).tanh()).matrix();
  tape.e_neg = (-tape.s.array()).exp().matrix();

  Matrix y = x;
  tape.output_b =
      ((x(Eigen::all, c.trans_idx).array() - t.array()) * tape.e_neg.array()).matrix();
  y(Eigen::all, c.trans_idx) = tape.output_b;
  logdet -= tape.s.rowwise().sum();
  return y;
}

void coupling_inverse_reverse(const AffineCoupling& c, std::span<const double> params,
                              const CouplingInverseTape& tape, Matrix& bar,
                              std::span<double> grad) {
  const double alpha = c.scale_clamp;
  const Eigen::ArrayXXd yb_bar = bar(Eigen::all, c.trans_idx).array();
  const Eigen::ArrayXXd xb_bar = yb_bar * tape.e_neg.array();
  const Eigen::ArrayXXd s_bar = -yb_bar * tape.output_b.array();
  const Eigen::ArrayXXd q = tape.s.array() / alpha;
  const Eigen::ArrayXXd sr_bar = (1.0 - q.square()) * s_bar;

  Matrix cond_bar_s, cond_bar_t;
  Tangents unused_s, unused_t;
  c.scale_net.reverse(params, tape.scale_tape, sr_bar.matrix(), {}, grad, cond_bar_s, unused_s);
  c.shift_net.reverse(params, tape.shift_tape, (-xb_bar).matrix(), {}, grad, cond_bar_t,
                      unused_t);

  bar(Eigen::all, c.trans_idx) = xb_bar.matrix();
  bar(Eigen::all, c.pass_idx) += cond_bar_s + cond_bar_t;
}

std::vector<int> inverse_permutation(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (std::size_t j = 0; j < perm.size(); ++j) inv[perm[j]] = static_cast<int>(j);
  return inv;
}

}  // namespace

// ---------------------------------------------------------------------------
// FlowModule
// ---------------------------------------------------------------------------

FlowModule FlowModule::build(const FlowSpec& spec) {
  if (spec.dim < 1) throw Error(ErrorCode::InvalidArgument, "FlowModule: dim must be >= 1");
  if (spec.couplings < 0) throw Error(ErrorCode::InvalidArgument, "FlowModule: couplings must be >= 0");
  std::vector<Layer> layers;
  if (spec.dim >= 2) {
    for (int i = 0; i < spec.couplings; ++i) {
      AffineCoupling c;
      c.dim = spec.dim;
      c.scale_clamp = spec.scale_clamp;
      c.mask.resize(spec.dim);
      for (int j = 0; j < spec.dim; ++j) c.mask[j] = (j % 2) == (i % 2);
      layers.emplace_back(std::move(c));
    }
  }
  // Hidden widths are threaded through from_layers via the Mlp widths.
  for (auto& layer : layers) {
    auto& c = std::get<AffineCoupling>(layer);
    int n_pass = 0;
    for (bool m : c.mask) n_pass += m ? 1 : 0;
    const int n_trans = spec.dim - n_pass;
    std::vector<int> widths{n_pass};
    widths.insert(widths.end(), spec.hidden.begin(), spec.hidden.end());
    widths.push_back(n_trans);
    c.scale_net.widths = widths;
    c.shift_net.widths = widths;
  }
  return from_layers(spec.dim, std::move(layers));
}

FlowModule FlowModule::from_layers(int dim, std::vector<Layer> layers) {
  FlowModule flow;
  flow.dim_ = dim;
  std::size_t offset = 0;
  for (auto& layer : layers) {
    if (auto* c = std::get_if<AffineCoupling>(&layer)) {
      if (static_cast<int>(c->mask.size()) != dim) {
        throw Error(ErrorCode::InvalidArgument, "AffineCoupling: mask length != dim");
      }
      c->dim = dim;
      c->pass_idx.clear();
      c->trans_idx.clear();
      for (int j = 0; j < dim; ++j) (c->mask[j] ? c->pass_idx : c->trans_idx).push_back(j);
      if (c->pass_idx.empty() || c->trans_idx.empty()) {
        throw Error(ErrorCode::InvalidArgument,
                    "AffineCoupling: mask needs at least one pass-through and one transformed entry");
      }
      if (c->scale_net.in_dim() != static_cast<int>(c->pass_idx.size()) ||
          c->scale_net.out_dim() != static_cast<int>(c->trans_idx.size()) ||
          c->shift_net.widths != c->scale_net.widths) {
        throw Error(ErrorCode::InvalidArgument, "AffineCoupling: conditioner widths do not match mask");
      }
      if (!(c->scale_clamp > 0.0)) {
        throw Error(ErrorCode::InvalidArgument, "AffineCoupling: scale clamp must be > 0");
      }
      c->scale_net.offset = offset;
      offset += c->scale_net.param_count();
      c->shift_net.offset = offset;
      offset += c->shift_net.param_count();
    } else {
      const auto& p = std::get<Permutation>(layer);
      std::vector<bool> seen(dim, false);
      if (static_cast<int>(p.perm.size()) != dim) {
        throw Error(ErrorCode::InvalidArgument, "Permutation: length != dim");
      }
      for (int v : p.perm) {
        if (v < 0 || v >= dim || seen[v]) throw Error(ErrorCode::InvalidArgument, "Permutation: not a permutation");
        seen[v] = true;
      }
    }
  }
  flow.layers_ = std::move(layers);
  flow.params_.assign(offset, 0.0);
  return flow;
}

void FlowModule::set_params(std::span<const double> p) {
  if (p.size() != params_.size()) {
    throw Error(ErrorCode::DimensionMismatch, "FlowModule::set_params: wrong parameter count");
  }
  std::copy(p.begin(), p.end(), params_.begin());
}

void FlowModule::init_identity(linalg::Rng& rng) {
  for (const auto& layer : layers_) {
    if (const auto* c = std::get_if<AffineCoupling>(&layer)) {
      c->scale_net.init(params_, rng);
      c->shift_net.init(params_, rng);
    }
  }
}

FlowPass FlowModule::forward_pass(const Matrix& z, const Tangents& tangents) const {
  if (z.cols() != dim_) throw Error(ErrorCode::DimensionMismatch, "forward: input width != flow dim");
  FlowPass pass;
  pass.out = z;
  pass.logdet = Vector::Zero(z.rows());
  pass.tangents = tangents;
  pass.tape.reserve(layers_.size());
  for (const auto& layer : layers_) {
    if (const auto* c = std::get_if<AffineCoupling>(&layer)) {
      CouplingTape tape;
      tape.in_tan = pass.tangents;
      pass.out = coupling_forward(*c, params_, pass.out, pass.tangents, pass.logdet, tape);
      pass.tape.emplace_back(std::move(tape));
    } else {
      const auto& perm = std::get<Permutation>(layer).perm;
      pass.out = Matrix(pass.out(Eigen::all, perm));
      for (auto& t : pass.tangents) t = Matrix(t(Eigen::all, perm));
      pass.tape.emplace_back(std::monostate{});
    }
  }
  check_finite(pass.out, "FlowModule::forward");
  return pass;
}

FlowCotangents FlowModule::reverse(const FlowPass& pass, const Matrix& out_bar,
                                   const Tangents& tangent_bar, const Vector& logdet_bar,
                                   std::span<double> grad) const {
  if (!grad.empty() && grad.size() != params_.size()) {
    throw Error(ErrorCode::DimensionMismatch, "reverse: gradient buffer has wrong size");
  }
  if (tangent_bar.size() != pass.tangents.size()) {
    throw Error(ErrorCode::DimensionMismatch, "reverse: tangent cotangent count mismatch");
  }
  FlowCotangents out{out_bar, tangent_bar};
  for (std::size_t i = layers_.size(); i-- > 0;) {
    if (const auto* c = std::get_if<AffineCoupling>(&layers_[i])) {
      coupling_reverse(*c, params_, std::get<CouplingTape>(pass.tape[i]), out.input, out.tangents,
                       logdet_bar, grad);
    } else {
      const auto inv = inverse_permutation(std::get<Permutation>(layers_[i]).perm);
      out.input = Matrix(out.input(Eigen::all, inv));
      for (auto& t : out.tangents) t = Matrix(t(Eigen::all, inv));
    }
  }
  return out;
}

InversePass FlowModule::inverse_pass(const Matrix& x) const {
  if (x.cols() != dim_) throw Error(ErrorCode::DimensionMismatch, "inverse: input width != flow dim");
  InversePass pass;
  pass.out = x;
  pass.logdet = Vector::Zero(x.rows());
  pass.tape.resize(layers_.size());
  for (std::size_t i = layers_.size(); i-- > 0;) {
    if (const auto* c = std::get_if<AffineCoupling>(&layers_[i])) {
      CouplingInverseTape tape;
      pass.out = coupling_inverse(*c, params_, pass.out, pass.logdet, tape);
      pass.tape[i] = std::move(tape);
    } else {
      const auto inv = inverse_permutation(std::get<Permutation>(layers_[i]).perm);
      pass.out = Matrix(pass.out(Eigen::all, inv));
      pass.tape[i] = std::monostate{};
    }
  }
  check_finite(pass.out, "FlowModule::inverse");
  return pass;
}

Matrix FlowModule::reverse_inverse(const InversePass& pass, const Matrix& out_bar,
                                   std::span<double> grad) const {
  if (!grad.empty() && grad.size() != params_.size()) {
    throw Error(ErrorCode::DimensionMismatch, "reverse_inverse: gradient buffer has wrong size");
  }
  Matrix bar = out_bar;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (const auto* c = std::get_if<AffineCoupling>(&layers_[i])) {
      coupling_inverse_reverse(*c, params_, std::get<CouplingInverseTape>(pass.tape[i]), bar, grad);
    } else {
      bar = Matrix(bar(Eigen::all, std::get<Permutation>(layers_[i]).perm));
    }
  }
  return bar;
}

std::pair<Vector, double> FlowModule::forward(const Vector& z) const {
  const FlowPass pass = forward_pass(z.transpose(), {});
  return {pass.out.row(0).transpose(), pass.logdet[0]};
}

std::pair<Vector, double> FlowModule::inverse(const Vector& x) const {
  const InversePass pass = inverse_pass(x.transpose());
  return {pass.out.row(0).transpose(), pass.logdet[0]};
}

Vector FlowModule::jvp(const Vector& z, const Vector& v) const {
  if (v.size() != dim_) throw Error(ErrorCode::DimensionMismatch, "jvp: tangent size != flow dim");
  const FlowPass pass = forward_pass(z.transpose(), {Matrix(v.transpose())});
  return pass.tangents[0].row(0).transpose();
}

std::pair<Vector, ParamGrad> FlowModule::vjp(const Vector& z, const Vector& u) const {
  if (u.size() != dim_) throw Error(ErrorCode::DimensionMismatch, "vjp: cotangent size != flow dim");
  const FlowPass pass = forward_pass(z.transpose(), {});
  ParamGrad grad(params_.size(), 0.0);
  const FlowCotangents bar = reverse(pass, u.transpose(), {}, Vector::Zero(1), grad);
  return {bar.input.row(0).transpose(), std::move(grad)};
}

ParamGrad FlowModule::grad_logdet_params(const Vector& z) const {
  const FlowPass pass = forward_pass(z.transpose(), {});
  ParamGrad grad(params_.size(), 0.0);
  reverse(pass, Matrix::Zero(1, dim_), {}, Vector::Ones(1), grad);
  return grad;
}

}  // namespace cmf::flownet
