#pragma once

// Objective assembly, Adam, annealing and the epoch loop.
//
// Per sample x with z = project(x), z~ = h(z), x^ = f(pad(z~)):
//
//   total = w * (log N(z) - logdet_h(z) - 1/2 logdet(J_f^T J_f))
//           - beta * |x - x^|^2 - gamma * sum_{i!=j} |G_ij|
//
// J_f = d f(pad(.)) / d z~ at z~, G = J^T J of the composite chart dx/dz and
// w the annealing weight. The objective is maximised. Gradients are total
// derivatives: z itself depends on the parameters through the projection.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cmf/injective.hpp"
#include "cmf/metric.hpp"

namespace cmf::training {

using injective::InjectiveFlow;
using linalg::Matrix;
using linalg::Vector;
using flownet::ParamGrad;

/// Rows per work unit. Batches are split into fixed chunks whose partial sums
/// are reduced in chunk order, so results do not depend on the thread count.
inline constexpr Eigen::Index kChunkRows = 128;

struct AnnealSchedule {
  int start_epoch = 25;
  int end_epoch = 50;
};

struct EarlyStop {
  int patience = 20;  // epochs without validation improvement
};

struct TrainConfig {
  double beta = 1.0;
  double gamma = 1.0;
  double lr = 1e-4;
  int epochs = 100;
  int batch_size = 1000;
  std::optional<AnnealSchedule> anneal;
  metric::EstimatorConfig estimator;
  std::optional<EarlyStop> early_stop;
  std::uint64_t seed = 0;
  int threads = 1;
  double clip_norm = 100.0;
  bool diagnostics = true;  // MACS and diagonal profile on the validation set
};

/// Every violation, one message each.
std::vector<std::string> validate(const TrainConfig& cfg);

struct LossBreakdown {
  double log_prior = 0.0;
  double logdet_h = 0.0;
  double half_logdet_jtj = 0.0;  // f-part: 1/2 logdet(J_f^T J_f)
  double recon = 0.0;
  double offdiag_l1 = 0.0;
  double total_objective = 0.0;
  double anneal_weight = 1.0;

  /// Mean log p(x) at the projections.
  double log_likelihood() const { return log_prior - logdet_h - half_logdet_jtj; }
};

/// Combination of batch means used for total_objective.
double assemble_total(double log_prior, double logdet_h, double half_logdet_jtj, double recon,
                      double offdiag_l1, double beta, double gamma, double weight);

struct LossOptions {
  double beta = 1.0;
  double gamma = 0.0;
  double anneal_weight = 1.0;
  metric::EstimatorConfig estimator;
  int threads = 1;
  /// Per-term multipliers applied to the gradient only; setting all but one
  /// to zero isolates that term's contribution.
  struct TermWeights {
    double log_prior = 1.0, logdet_h = 1.0, half_logdet = 1.0, recon = 1.0, offdiag = 1.0;
  } grad_terms;
};

struct LossResult {
  LossBreakdown breakdown;
  ParamGrad grad;        // d total / d params (ascent direction)
  bool cg_converged = true;
  int cg_iterations = 0;
};

/// Objective and gradient over a batch. `rng` seeds the probe streams in
/// stochastic mode (one split per row index); it is not advanced.
LossResult loss(const InjectiveFlow& gf, const Matrix& x, const LossOptions& opts,
                const linalg::Rng& rng);

/// Objective only.
LossBreakdown evaluate(const InjectiveFlow& gf, const Matrix& x, const LossOptions& opts);

/// Per-row terms, for sample dumps and log-likelihood lists.
struct SampleTerms {
  Matrix z;
  Vector log_prior, logdet_h, half_logdet_jtj, recon, offdiag_l1;
  Vector log_likelihood() const { return log_prior - logdet_h - half_logdet_jtj; }
};
SampleTerms sample_terms(const InjectiveFlow& gf, const Matrix& x, bool with_offdiag, int threads = 1);

struct AdamState {
  std::vector<double> m, v;
  long step = 0;
  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double eps = 1e-8;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// One ascent step: params += lr * m_hat / (sqrt(v_hat) + eps).
void adam_step(std::span<double> params, std::span<const double> grad, AdamState& state, double lr);

/// 0 before start, linear to 1 over [start, end], 1 after; 1 with no schedule.
double anneal_weight(int epoch, const std::optional<AnnealSchedule>& schedule);

/// Rescales grad to `max_norm` if its l2 norm exceeds it. Returns the norm
/// before clipping.
double clip_gradient(std::span<double> grad, double max_norm);

struct EpochRecord {
  int epoch = 0;
  LossBreakdown train;  // mean over the epoch's minibatches
  LossBreakdown valid;  // full validation set, weight 1
  double grad_norm = 0.0;  // largest pre-clip norm in the epoch
  int clipped_steps = 0;
  bool cg_converged = true;
  int cg_iterations = 0;
  double macs = 0.0;
  Vector diag_profile;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  double best_valid = 0.0;
  bool diverged = false;
  bool early_stopped = false;
  std::string error;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains in place and leaves gf at the best-validation parameters. A
/// non-finite step ends training with the partial history and diverged set.
TrainResult train(InjectiveFlow& gf, const Matrix& train_x, const Matrix& valid_x,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Mean MACS of the composite Jacobian over the rows of z.
double mean_macs(const InjectiveFlow& gf, const Matrix& z);

}  // namespace cmf::training
