#include "cmf/training.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "cmf/error.hpp"
#include "parallel.hpp"

namespace cmf::training {

using injective::basis_seeds;
using injective::jacobian_row;

std::vector<std::string> validate(const TrainConfig& cfg) {
  std::vector<std::string> errs;
  if (!(cfg.beta >= 0.0)) errs.push_back("train.beta must be >= 0");
  if (!(cfg.gamma >= 0.0)) errs.push_back("train.gamma must be >= 0");
  if (!(cfg.lr > 0.0)) errs.push_back("train.lr must be > 0");
  if (cfg.epochs < 1) errs.push_back("train.epochs must be >= 1");
  if (cfg.batch_size < 1) errs.push_back("train.batch_size must be >= 1");
  if (cfg.anneal && !(cfg.anneal->start_epoch >= 0 && cfg.anneal->start_epoch < cfg.anneal->end_epoch)) {
    errs.push_back("train.anneal requires 0 <= start < end");
  }
  if (cfg.estimator.probes < 1) errs.push_back("train.estimator.probes must be >= 1");
  if (!(cfg.estimator.cg_tol > 0.0)) errs.push_back("train.estimator.cg_tol must be > 0");
  if (cfg.early_stop && cfg.early_stop->patience < 1) errs.push_back("train.early_stop.patience must be >= 1");
  if (cfg.threads < 1) errs.push_back("train.threads must be >= 1");
  if (!(cfg.clip_norm > 0.0)) errs.push_back("train.clip_norm must be > 0");
  return errs;
}

double assemble_total(double log_prior, double logdet_h, double half_logdet_jtj, double recon,
                      double offdiag_l1, double beta, double gamma, double weight) {
  return weight * ((log_prior - logdet_h) - half_logdet_jtj) - beta * recon - gamma * offdiag_l1;
}

namespace {

struct Context {
  const InjectiveFlow* gf = nullptr;
  const LossOptions* opts = nullptr;
  bool with_offdiag = false;
  bool want_grad = false;
  double scale = 1.0;  // 1 / batch rows
  const linalg::Rng* rng = nullptr;
};

struct ChunkStats {
  bool cg_converged = true;
  int cg_iterations = 0;
};

/// d(1/2 logdet J^T J)/dJ = J G^-1, using the (possibly jittered) factor.
Matrix half_logdet_cotangent(const Matrix& j, const linalg::CholeskyResult& chol) {
  const Eigen::Index d = j.cols();
  const Matrix linv = chol.factor.triangularView<Eigen::Lower>().solve(Matrix::Identity(d, d));
  return j * (linv.transpose() * linv);
}

/// Hutchinson form (1/2K) sum_k (J eps_k u_k^T + J u_k eps_k^T), u_k = G^-1 eps_k by CG.
Matrix half_logdet_cotangent_stochastic(const Matrix& j, const Matrix& g,
                                        const metric::EstimatorConfig& est, linalg::Rng rng,
                                        ChunkStats& stats) {
  const int d = static_cast<int>(j.cols());
  const linalg::SpdOperator op{d, [&g](const Vector& v) -> Vector { return g * v; }};
  Matrix w = Matrix::Zero(j.rows(), d);
  for (int k = 0; k < est.probes; ++k) {
    const Vector eps = linalg::gaussian_probe(rng, d);
    const linalg::CgResult cg = linalg::cg_solve(op, eps, {est.cg_tol, 0});
    stats.cg_converged = stats.cg_converged && cg.converged;
    stats.cg_iterations += cg.iters;
    w += (j * eps) * cg.x.transpose() + (j * cg.x) * eps.transpose();
  }
  return (0.5 / est.probes) * w;
}

void run_chunk(const Context& ctx, const Matrix& x, Eigen::Index row0, SampleTerms& out,
               std::span<double> grad, ChunkStats& stats) {
  const InjectiveFlow& gf = *ctx.gf;
  const LossOptions& o = *ctx.opts;
  const int d = gf.latent_dim();
  const Eigen::Index m = x.rows();

  const injective::ProjectPass pp = gf.project_pass(x);
  const Matrix& z = pp.z();
  const flownet::Tangents h_seeds = ctx.with_offdiag ? basis_seeds(m, d) : flownet::Tangents{};
  const std::size_t hc = h_seeds.size();
  const injective::ChartPass pass = gf.chart_forward(z, h_seeds, basis_seeds(m, d));

  const injective::LatentPrior prior{d};
  out.z.middleRows(row0, m) = z;
  out.log_prior.segment(row0, m) = prior.log_density_rows(z);
  out.logdet_h.segment(row0, m) = pass.logdet_h();
  out.recon.segment(row0, m) = (x - pass.x()).rowwise().squaredNorm();

  flownet::Tangents bars;
  if (ctx.want_grad) {
    bars.assign(hc + d, Matrix::Zero(m, gf.data_dim()));
  }
  const double w = o.anneal_weight;
  const double hf_coef = -w * o.grad_terms.half_logdet * ctx.scale;
  const double od_coef = -o.gamma * o.grad_terms.offdiag * ctx.scale;

  for (Eigen::Index r = 0; r < m; ++r) {
    const Matrix jf = jacobian_row(pass.tangents(), r, hc, d);
    const Matrix gf_metric = metric::metric_tensor(jf).g;
    const linalg::CholeskyResult chol = linalg::cholesky_logdet(gf_metric);
    out.half_logdet_jtj[row0 + r] = 0.5 * chol.logdet;
    if (ctx.want_grad && hf_coef != 0.0) {
      const Matrix wt = o.estimator.mode == metric::EstimatorMode::Exact
                            ? half_logdet_cotangent(jf, chol)
                            : half_logdet_cotangent_stochastic(
                                  jf, gf_metric, o.estimator,
                                  ctx.rng->split(static_cast<std::uint64_t>(row0 + r)), stats);
      for (int k = 0; k < d; ++k) bars[hc + k].row(r) = hf_coef * wt.col(k).transpose();
    }
    if (ctx.with_offdiag) {
      const Matrix j = jacobian_row(pass.tangents(), r, 0, d);
      const Matrix g = metric::metric_tensor(j).g;
      out.offdiag_l1[row0 + r] = metric::offdiag_l1(g);
      if (ctx.want_grad && od_coef != 0.0) {
        const Matrix wt = metric::offdiag_l1_jacobian_cotangent(j, g);
        for (int k = 0; k < d; ++k) bars[k].row(r) = od_coef * wt.col(k).transpose();
      }
    } else {
      out.offdiag_l1[row0 + r] = 0.0;
    }
  }

  if (!ctx.want_grad) return;
  const Matrix x_bar = (2.0 * o.beta * o.grad_terms.recon * ctx.scale) * (x - pass.x());
  const Vector ldh_bar = Vector::Constant(m, -w * o.grad_terms.logdet_h * ctx.scale);
  Matrix z_bar = gf.chart_reverse(pass, x_bar, bars, ldh_bar, grad);
  z_bar -= (w * o.grad_terms.log_prior * ctx.scale) * z;
  gf.project_reverse(pp, z_bar, grad);
}

struct BatchResult {
  SampleTerms terms;
  ParamGrad grad;
  ChunkStats stats;
};

BatchResult run_batch(const InjectiveFlow& gf, const Matrix& x, const LossOptions& opts, bool with_offdiag,
                      bool want_grad, const linalg::Rng* rng) {
  if (x.rows() == 0) throw Error(ErrorCode::InvalidArgument, "loss: empty batch");
  if (x.cols() != gf.data_dim()) throw Error(ErrorCode::DimensionMismatch, "loss: batch width != D");
  const Eigen::Index n = x.rows();
  BatchResult res;
  SampleTerms& t = res.terms;
  t.z.resize(n, gf.latent_dim());
  t.log_prior.resize(n);
  t.logdet_h.resize(n);
  t.half_logdet_jtj.resize(n);
  t.recon.resize(n);
  t.offdiag_l1.resize(n);

  Context ctx{&gf, &opts, with_offdiag, want_grad, 1.0 / static_cast<double>(n), rng};
  const std::size_t chunks = static_cast<std::size_t>((n + kChunkRows - 1) / kChunkRows);
  std::vector<ParamGrad> grads(want_grad ? chunks : 0);
  std::vector<ChunkStats> stats(chunks);
  detail::parallel_for(chunks, opts.threads, [&](std::size_t c) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(c) * kChunkRows;
    const Eigen::Index m = std::min(kChunkRows, n - r0);
    std::span<double> g;
    if (want_grad) {
      grads[c].assign(gf.param_count(), 0.0);
      g = grads[c];
    }
    run_chunk(ctx, x.middleRows(r0, m), r0, t, g, stats[c]);
  });

  if (want_grad) {
    res.grad.assign(gf.param_count(), 0.0);
    for (const auto& g : grads) {
      for (std::size_t i = 0; i < g.size(); ++i) res.grad[i] += g[i];
    }
  }
  for (const auto& s : stats) {
    res.stats.cg_converged = res.stats.cg_converged && s.cg_converged;
    res.stats.cg_iterations += s.cg_iterations;
  }
  return res;
}

double ordered_mean(const Vector& v) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += v[i];
  return s / static_cast<double>(v.size());
}

LossBreakdown summarize(const SampleTerms& t, const LossOptions& opts) {
  LossBreakdown b;
  b.log_prior = ordered_mean(t.log_prior);
  b.logdet_h = ordered_mean(t.logdet_h);
  b.half_logdet_jtj = ordered_mean(t.half_logdet_jtj);
  b.recon = ordered_mean(t.recon);
  b.offdiag_l1 = ordered_mean(t.offdiag_l1);
  b.anneal_weight = opts.anneal_weight;
  b.total_objective = assemble_total(b.log_prior, b.logdet_h, b.half_logdet_jtj, b.recon, b.offdiag_l1,
                                     opts.beta, opts.gamma, opts.anneal_weight);
  if (!std::isfinite(b.total_objective)) throw Error(ErrorCode::NonFinite, "loss: non-finite objective");
  return b;
}

}  // namespace

LossResult loss(const InjectiveFlow& gf, const Matrix& x, const LossOptions& opts, const linalg::Rng& rng) {
  metric::validate(opts.estimator);
  BatchResult br = run_batch(gf, x, opts, opts.gamma > 0.0, true, &rng);
  LossResult out;
  out.breakdown = summarize(br.terms, opts);
  out.grad = std::move(br.grad);
  for (double g : out.grad) {
    if (!std::isfinite(g)) throw Error(ErrorCode::NonFinite, "loss: non-finite gradient");
  }
  out.cg_converged = br.stats.cg_converged;
  out.cg_iterations = br.stats.cg_iterations;
  return out;
}

LossBreakdown evaluate(const InjectiveFlow& gf, const Matrix& x, const LossOptions& opts) {
  return summarize(run_batch(gf, x, opts, opts.gamma > 0.0, false, nullptr).terms, opts);
}

SampleTerms sample_terms(const InjectiveFlow& gf, const Matrix& x, bool with_offdiag, int threads) {
  LossOptions opts;
  opts.threads = threads;
  return run_batch(gf, x, opts, with_offdiag, false, nullptr).terms;
}

void adam_step(std::span<double> params, std::span<const double> grad, AdamState& state, double lr) {
  if (grad.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw Error(ErrorCode::DimensionMismatch, "adam_step: buffer lengths differ");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(AdamState::beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(AdamState::beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = AdamState::beta1 * state.m[i] + (1.0 - AdamState::beta1) * grad[i];
    state.v[i] = AdamState::beta2 * state.v[i] + (1.0 - AdamState::beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] += lr * mhat / (std::sqrt(vhat) + AdamState::eps);
  }
}

double anneal_weight(int epoch, const std::optional<AnnealSchedule>& schedule) {
  if (!schedule) return 1.0;
  if (epoch < schedule->start_epoch) return 0.0;
  if (epoch >= schedule->end_epoch) return 1.0;
  return static_cast<double>(epoch - schedule->start_epoch) /
         static_cast<double>(schedule->end_epoch - schedule->start_epoch);
}

double clip_gradient(std::span<double> grad, double max_norm) {
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (double& g : grad) g *= s;
  }
  return norm;
}

double mean_macs(const InjectiveFlow& gf, const Matrix& z) {
  if (z.rows() == 0) return 0.0;
  double total = 0.0;
  for (Eigen::Index r0 = 0; r0 < z.rows(); r0 += kChunkRows) {
    const Eigen::Index m = std::min(kChunkRows, z.rows() - r0);
    for (const Matrix& j : metric::jacobians(gf, z.middleRows(r0, m))) total += metric::macs(j);
  }
  return total / static_cast<double>(z.rows());
}

namespace {

constexpr Eigen::Index kDiagnosticRows = 512;

void add_scaled(LossBreakdown& acc, const LossBreakdown& b, double s) {
  acc.log_prior += s * b.log_prior;
  acc.logdet_h += s * b.logdet_h;
  acc.half_logdet_jtj += s * b.half_logdet_jtj;
  acc.recon += s * b.recon;
  acc.offdiag_l1 += s * b.offdiag_l1;
  acc.total_objective += s * b.total_objective;
}

}  // namespace

TrainResult train(InjectiveFlow& gf, const Matrix& train_x, const Matrix& valid_x, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  const auto errs = validate(cfg);
  if (!errs.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw Error(ErrorCode::Config, msg);
  }
  if (train_x.rows() == 0 || valid_x.rows() == 0) {
    throw Error(ErrorCode::InvalidArgument, "train: empty train or validation split");
  }

  const linalg::Rng master(cfg.seed);
  const linalg::Rng shuffle_base = master.split(1);
  const linalg::Rng probe_base = master.split(2);

  std::vector<double> params = gf.params();
  std::vector<double> best_params = params;
  AdamState adam(params.size());

  const Eigen::Index n = train_x.rows();
  const Eigen::Index bs = std::min<Eigen::Index>(cfg.batch_size, n);
  const Matrix diag_x = valid_x.topRows(std::min(kDiagnosticRows, valid_x.rows()));

  TrainResult result;
  result.best_valid = -std::numeric_limits<double>::infinity();
  std::uint64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    LossOptions opts;
    opts.beta = cfg.beta;
    opts.gamma = cfg.gamma;
    opts.anneal_weight = anneal_weight(epoch, cfg.anneal);
    opts.estimator = cfg.estimator;
    opts.threads = cfg.threads;
    rec.train.anneal_weight = opts.anneal_weight;

    std::vector<Eigen::Index> order(n);
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    linalg::Rng shuffle = shuffle_base.split(static_cast<std::uint64_t>(epoch));
    shuffle.shuffle(order);

    try {
      for (Eigen::Index b0 = 0; b0 < n; b0 += bs) {
        const Eigen::Index m = std::min(bs, n - b0);
        const std::vector<Eigen::Index> idx(order.begin() + b0, order.begin() + b0 + m);
        const Matrix xb = train_x(idx, Eigen::all);
        LossResult lr = loss(gf, xb, opts, probe_base.split(step++));
        const double norm = clip_gradient(lr.grad, cfg.clip_norm);
        if (norm > cfg.clip_norm) ++rec.clipped_steps;
        rec.grad_norm = std::max(rec.grad_norm, norm);
        rec.cg_converged = rec.cg_converged && lr.cg_converged;
        rec.cg_iterations += lr.cg_iterations;
        add_scaled(rec.train, lr.breakdown, static_cast<double>(m) / static_cast<double>(n));
        adam_step(params, lr.grad, adam, cfg.lr);
        gf.set_params(params);
      }
      LossOptions vopts = opts;
      vopts.anneal_weight = 1.0;
      rec.valid = evaluate(gf, valid_x, vopts);
      if (cfg.diagnostics) {
        const Matrix z = gf.project_rows(diag_x);
        rec.macs = mean_macs(gf, z);
        rec.diag_profile = metric::diag_profile(z, gf);
      }
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NonFinite && e.code() != ErrorCode::NotPositiveDefinite) throw;
      result.diverged = true;
      result.error = "epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }

    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (rec.valid.total_objective > result.best_valid) {
      result.best_valid = rec.valid.total_objective;
      result.best_epoch = epoch;
      best_params = params;
    } else if (cfg.early_stop && epoch - result.best_epoch >= cfg.early_stop->patience) {
      result.early_stopped = true;
      break;
    }
  }

  gf.set_params(best_params);
  return result;
}

}  // namespace cmf::training
