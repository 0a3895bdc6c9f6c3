// Acceptance checks. Each criterion prints one PASS or FAIL line; indented
// lines before it carry per-run detail. Exit status is 0 only if every
// selected criterion passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "CLI11.hpp"
#include "cmf/checkpoint.hpp"
#include "cmf/evalkit.hpp"
#include "cmf/run.hpp"
#include "cmf/training.hpp"
#include "test_support.hpp"

using namespace cmf;
using linalg::Matrix;
using linalg::Vector;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kFdEps = 1e-5;
constexpr double kGradRelTol = 1e-4;
constexpr double kOffdiagRelTol = 1e-3;
constexpr std::size_t kGradMaxParams = 500;
constexpr double kGradSeconds = 60.0;

constexpr int kMetricPoints = 50;
constexpr double kMetricTol = 1e-5;

constexpr int kEstimatorDraws = 10000;
constexpr int kEstimatorRows = 512;
constexpr double kEstimatorRelTol = 0.02;
constexpr double kEstimatorFloor = 1e-3;
constexpr double kEstimatorSeconds = 300.0;

constexpr double kPointwiseRelTol = 1e-12;

constexpr double kFuzzyMacsMax = 0.3;
constexpr double kFuzzySecondsPerRun = 1200.0;
constexpr double kSphereRatioMax = 0.15;
constexpr double kSphereSeconds = 3600.0;
constexpr double kFidTol = 1e-8;
constexpr double kFidTraceTol = 1e-6;

const std::vector<std::uint64_t> kSeeds = {1, 2, 3};

struct Env {
  fs::path configs;
  fs::path work;
  fs::path cli;
};

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

void note(const std::string& line) {
  std::printf("  %s\n", line.c_str());
  std::fflush(stdout);
}

Matrix random_rows(Eigen::Index n, int dim, std::uint64_t seed) {
  linalg::Rng rng(seed);
  Matrix x(n, dim);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int j = 0; j < dim; ++j) x(i, j) = rng.normal();
  return x;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

Outcome gradient_fidelity(const Env&) {
  const auto t0 = Clock::now();
  const auto gf = testing::random_injective(2, 3, 17, 0.4, {8}, 2, 2);
  if (gf.param_count() > kGradMaxParams) return {false, fmt("%zu parameters", gf.param_count())};
  const Matrix x = random_rows(8, 3, 3);

  struct Term {
    const char* name;
    double tol;
  };
  const Term terms[] = {{"log_prior", kGradRelTol}, {"logdet_h", kGradRelTol}, {"half_logdet", kGradRelTol},
                        {"recon", kGradRelTol}, {"offdiag_l1", kOffdiagRelTol}};
  bool ok = true;
  std::string worst;
  for (const auto& term : terms) {
    const std::string t = term.name;
    training::LossOptions o;
    o.beta = 1.5;
    o.gamma = 0.7;
    o.anneal_weight = 0.8;
    o.grad_terms = {t == "log_prior" ? 1.0 : 0.0, t == "logdet_h" ? 1.0 : 0.0, t == "half_logdet" ? 1.0 : 0.0,
                    t == "recon" ? 1.0 : 0.0, t == "offdiag_l1" ? 1.0 : 0.0};
    auto value = [&](const training::LossBreakdown& b) {
      if (t == "log_prior") return o.anneal_weight * b.log_prior;
      if (t == "logdet_h") return -o.anneal_weight * b.logdet_h;
      if (t == "half_logdet") return -o.anneal_weight * b.half_logdet_jtj;
      if (t == "recon") return -o.beta * b.recon;
      return -o.gamma * b.offdiag_l1;
    };
    const auto analytic = training::loss(gf, x, o, linalg::Rng(0)).grad;
    const auto fd = testing::fd_gradient(
        [&](std::span<const double> p) {
          auto m = gf;
          m.set_params(p);
          return value(training::evaluate(m, x, o));
        },
        gf.params(), kFdEps);
    const auto check = testing::compare_gradients(analytic, fd, term.tol);
    note(fmt("%-12s %3zu coordinates, worst rel %.2e (tol %.0e)", term.name, check.checked, check.worst_rel,
             term.tol));
    if (!check.ok || check.checked == 0) {
      ok = false;
      worst += std::string(" ") + term.name;
    }
  }
  const double secs = seconds_since(t0);
  if (secs > kGradSeconds) ok = false;
  return {ok, fmt("d=2 D=3, %zu params, 5 terms vs central differences, %.1f s%s", gf.param_count(), secs,
                  worst.empty() ? "" : (", failing:" + worst).c_str())};
}

Outcome metric_correctness(const Env&) {
  double worst = 0.0;
  for (int i = 0; i < kMetricPoints; ++i) {
    const int d = 1 + i % 6;
    const int D = d + i % 3;
    const auto gf = testing::random_injective(d, D, 500 + i, 0.4);
    const Vector z = testing::random_vector(d, 900 + i);
    const Matrix g = metric::metric_tensor(metric::jacobian(gf, z)).g;
    const Matrix j_fd = testing::fd_jacobian([&](const Vector& v) { return gf.embed(v); }, z);
    const Matrix g_fd = j_fd.transpose() * j_fd;
    worst = std::max(worst, (g - g_fd).cwiseAbs().rowwise().sum().maxCoeff());
  }
  return {worst <= kMetricTol,
          fmt("%d points, d in 1..6, worst infinity-norm error %.2e (tol %.0e)", kMetricPoints, worst, kMetricTol)};
}

Outcome estimator_unbiasedness(const Env&) {
  const auto t0 = Clock::now();
  const auto gf = testing::random_injective(3, 5, 41, 0.3);
  const Matrix x = random_rows(kEstimatorRows, 5, 9);
  training::LossOptions exact;
  exact.gamma = 0.0;
  exact.grad_terms = {0, 0, 1, 0, 0};
  training::LossOptions stoch = exact;
  stoch.estimator = {1, 1e-3, metric::EstimatorMode::Stochastic};
  const auto ref = training::loss(gf, x, exact, linalg::Rng(0)).grad;
  const std::size_t n = ref.size();
  Vector sum = Vector::Zero(n), sq = Vector::Zero(n);
  const linalg::Rng base(2024);
  for (int t = 0; t < kEstimatorDraws; ++t) {
    const auto g = training::loss(gf, x, stoch, base.split(static_cast<std::uint64_t>(t))).grad;
    const Vector v = Eigen::Map<const Vector>(g.data(), n);
    sum += v;
    sq += v.cwiseProduct(v);
  }
  const Vector mean = sum / kEstimatorDraws;
  int checked = 0, outside = 0;
  double worst = 0.0, worst_z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (std::abs(ref[i]) <= kEstimatorFloor) continue;
    ++checked;
    const double rel = std::abs(mean[i] - ref[i]) / std::abs(ref[i]);
    const double se = std::sqrt(std::max(0.0, sq[i] / kEstimatorDraws - mean[i] * mean[i]) / kEstimatorDraws);
    worst = std::max(worst, rel);
    if (se > 0) worst_z = std::max(worst_z, std::abs(mean[i] - ref[i]) / se);
    outside += rel > kEstimatorRelTol;
  }
  const double secs = seconds_since(t0);
  note(fmt("largest deviation in standard errors: %.2f", worst_z));
  const bool ok = checked > 0 && outside == 0 && secs < kEstimatorSeconds;
  return {ok, fmt("d=3 D=5, %d rows, %d draws (K=1, cg_tol 1e-3): %d of %d coordinates outside %.0f%%, worst %.3f, "
                  "%.0f s",
                  kEstimatorRows, kEstimatorDraws, outside, checked, 100 * kEstimatorRelTol, worst, secs)};
}

// Log-likelihood minus beta times reconstruction from per-row terms, summed
// in row order.
double rnf_objective(const training::SampleTerms& t, double beta) {
  double lp = 0.0, lh = 0.0, hf = 0.0, rc = 0.0;
  for (Eigen::Index i = 0; i < t.z.rows(); ++i) {
    lp += t.log_prior[i];
    lh += t.logdet_h[i];
    hf += t.half_logdet_jtj[i];
    rc += t.recon[i];
  }
  const double n = static_cast<double>(t.z.rows());
  return (lp / n - lh / n - hf / n) - beta * (rc / n);
}

// The same objective from single-point maps, as a numerical cross-check.
double rnf_objective_pointwise(const injective::InjectiveFlow& gf, const Matrix& x, double beta) {
  const int d = gf.latent_dim();
  const int D = gf.data_dim();
  const injective::LatentPrior prior{d};
  double lp = 0.0, lh = 0.0, hf = 0.0, rc = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Vector xi = x.row(i).transpose();
    const Vector z = gf.project(xi);
    const auto [zt, logdet_h] = gf.h().forward(z);
    Vector padded = Vector::Zero(D);
    padded.head(d) = zt;
    Matrix jf(D, d);
    for (int k = 0; k < d; ++k) jf.col(k) = gf.f().jvp(padded, Vector::Unit(D, k));
    const auto chol = linalg::cholesky_logdet(jf.transpose() * jf);
    const Vector x_hat = gf.f().forward(padded).first;
    lp += prior.log_density(z);
    lh += logdet_h;
    hf += 0.5 * chol.logdet;
    rc += (xi - x_hat).squaredNorm();
  }
  const double n = static_cast<double>(x.rows());
  return (lp / n - lh / n - hf / n) - beta * (rc / n);
}

Outcome rnf_reduction(const Env&) {
  const double beta = 2.5;
  int mismatches = 0;
  double worst_pointwise = 0.0;
  const struct {
    int d, D;
    std::uint64_t seed;
  } cases[] = {{2, 3, 1}, {2, 2, 2}, {3, 5, 3}, {1, 4, 4}};
  for (const auto& c : cases) {
    const auto gf = testing::random_injective(c.d, c.D, 60 + c.seed, 0.4);
    const Matrix x = random_rows(300, c.D, 70 + c.seed);
    training::LossOptions o;
    o.beta = beta;
    o.gamma = 0.0;
    const double train_path = training::loss(gf, x, o, linalg::Rng(c.seed)).breakdown.total_objective;
    const double eval_path = training::evaluate(gf, x, o).total_objective;
    const double independent = rnf_objective(training::sample_terms(gf, x, false), beta);
    const double pointwise = rnf_objective_pointwise(gf, x, beta);
    const bool same = train_path == independent && eval_path == independent;
    mismatches += !same;
    worst_pointwise = std::max(worst_pointwise, std::abs(pointwise - independent) / std::abs(independent));
    note(fmt("d=%d D=%d: training path %.17g, assembled %.17g, pointwise %.17g", c.d, c.D, train_path, independent,
             pointwise));
  }
  const bool ok = mismatches == 0 && worst_pointwise < kPointwiseRelTol;
  return {ok, fmt("gamma=0 objective vs independent assembly on 4 charts, 300 rows each: %d bitwise mismatches; "
                  "single-point maps agree to %.1e relative",
                  mismatches, worst_pointwise)};
}

struct TrainedRun {
  run::RunConfig cfg;
  run::TrainSummary summary;
  injective::InjectiveFlow model;
  double seconds = 0.0;
};

TrainedRun train_preset(const Env& env, const std::string& preset, std::uint64_t seed, std::optional<double> gamma,
                        const std::string& tag) {
  run::Overrides o;
  o.seed = seed;
  o.gamma = gamma;
  o.deterministic = true;
  o.out_dir = (env.work / fmt("%s_%s_seed%llu", preset.c_str(), tag.c_str(), static_cast<unsigned long long>(seed)))
                  .string();
  TrainedRun r;
  r.cfg = run::apply(run::load_config((env.configs / (preset + ".yaml")).string()), o);
  const auto t0 = Clock::now();
  r.summary = run::train_run(r.cfg);
  r.seconds = seconds_since(t0);
  r.model = checkpoint::load(run::run_checkpoint_path(r.cfg.out_dir)).model;
  note(fmt("%s seed %llu gamma %g: test macs %.4f, loglik %.4f, best epoch %d, %.0f s", tag.c_str(),
           static_cast<unsigned long long>(seed), r.cfg.train.gamma, r.summary.report.macs,
           r.summary.report.mean_loglik, r.summary.result.best_epoch, r.seconds));
  return r;
}

Outcome fuzzy_line(const Env& env) {
  bool ok = true;
  double worst_cmf = 0.0, slowest = 0.0;
  for (const auto seed : kSeeds) {
    const auto rnf = train_preset(env, "fuzzy-line", seed, 0.0, "rnf");
    const auto cmf = train_preset(env, "fuzzy-line", seed, std::nullopt, "cmf");
    const double a = cmf.summary.report.macs, b = rnf.summary.report.macs;
    ok = ok && a < b && a < kFuzzyMacsMax;
    worst_cmf = std::max(worst_cmf, a);
    slowest = std::max({slowest, rnf.seconds, cmf.seconds});
  }
  ok = ok && slowest < kFuzzySecondsPerRun;
  return {ok, fmt("3 seeds: CMF macs below RNF and below %.1f (largest CMF %.4f), slowest run %.0f s",
                  kFuzzyMacsMax, worst_cmf, slowest)};
}

double mean_diag_ratio(const injective::InjectiveFlow& gf, const Matrix& x) {
  const Matrix z = gf.project_rows(x);
  double s = 0.0;
  for (const auto& j : metric::jacobians(gf, z)) {
    const Vector diag = (j.transpose() * j).diagonal();
    s += diag.minCoeff() / diag.maxCoeff();
  }
  return s / static_cast<double>(z.rows());
}

Outcome sphere(const Env& env) {
  const auto t0 = Clock::now();
  const auto cmf = train_preset(env, "sphere", kSeeds.front(), std::nullopt, "cmf");
  const auto rnf = train_preset(env, "sphere", kSeeds.front(), 0.0, "rnf");
  const auto test = datasets::load(cmf.cfg.dataset).test;
  const double ratio = mean_diag_ratio(cmf.model, test);
  const double rnf_ratio = mean_diag_ratio(rnf.model, test);
  const double secs = seconds_since(t0);
  note(fmt("RNF min/max diagonal ratio %.4f", rnf_ratio));
  const double ll_cmf = cmf.summary.report.mean_loglik, ll_rnf = rnf.summary.report.mean_loglik;
  const bool ok = ratio < kSphereRatioMax && ll_cmf > ll_rnf && secs < kSphereSeconds;
  return {ok, fmt("CMF mean min/max G_kk %.4f (limit %.2f); loglik CMF %.4f vs RNF %.4f; %.0f s", ratio,
                  kSphereRatioMax, ll_cmf, ll_rnf, secs)};
}

Matrix random_psd(int n, std::uint64_t seed) {
  const Matrix a = random_rows(n, n, seed);
  return a * a.transpose() / n;
}

double naive_trace_sqrt(const Matrix& a, const Matrix& b) {
  Eigen::EigenSolver<Matrix> es(a * b);
  double s = 0.0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) s += std::sqrt(std::max(0.0, es.eigenvalues()[i].real()));
  return s;
}

Outcome fid_suite(const Env&) {
  bool ok = true;
  const Matrix x = random_rows(400, 5, 31);
  const auto m = evalkit::moments(x);
  const double self = evalkit::fid_like(m, m);
  ok = ok && std::abs(self) <= kFidTol;

  double shift_err = 0.0;
  for (int t = 0; t < 20; ++t) {
    const int n = 1 + t % 6;
    const Vector delta = testing::random_vector(n, 40 + t, 2.0);
    const Matrix s = random_psd(n, 60 + t) + Matrix::Identity(n, n);
    const double got = evalkit::fid_like({Vector::Zero(n), s}, {delta, s});
    shift_err = std::max(shift_err, std::abs(got - delta.squaredNorm()));
  }
  ok = ok && shift_err <= kFidTol;

  double trace_err = 0.0;
  for (std::uint64_t t = 0; t < 100; ++t) {
    const int n = 2 + static_cast<int>(t % 5);
    const Matrix a = random_psd(n, 100 + t), b = random_psd(n, 200 + t);
    const double via_fid = 0.5 * (a.trace() + b.trace() - evalkit::fid_like({Vector::Zero(n), a}, {Vector::Zero(n), b}));
    trace_err = std::max(trace_err, std::abs(via_fid - naive_trace_sqrt(a, b)));
  }
  ok = ok && trace_err <= kFidTraceTol;
  return {ok, fmt("self %.1e, mean shift error %.1e (20 cases), trace error %.1e (100 PSD pairs)", std::abs(self),
                  shift_err, trace_err)};
}

Outcome tabular_proxy(const Env& env) {
  bool ok = true;
  std::string pairs;
  for (const auto seed : kSeeds) {
    const auto rnf = train_preset(env, "tabular", seed, 0.0, "rnf");
    const auto cmf = train_preset(env, "tabular", seed, std::nullopt, "cmf");
    const double a = cmf.summary.report.macs, b = rnf.summary.report.macs;
    ok = ok && a <= b;
    pairs += fmt(" %.3f/%.3f", a, b);
  }
  return {ok, "3 seeds, CMF/RNF macs:" + pairs};
}

int run_cli(const Env& env, const std::string& args) {
  const std::string cmd = "\"" + env.cli.string() + "\" " + args + " > /dev/null";
  return std::system(cmd.c_str());
}

Outcome determinism(const Env& env) {
  if (env.cli.empty()) return {false, "no --cli given"};
  bool ok = true;
  std::string detail;
  for (const auto mode : {metric::EstimatorMode::Exact, metric::EstimatorMode::Stochastic}) {
    auto cfg = run::load_config((env.configs / "moebius.yaml").string());
    cfg.train.epochs = 30;
    cfg.train.estimator.mode = mode;
    const std::string tag = metric::to_string(mode);
    const fs::path config = env.work / ("determinism_" + tag + ".yaml");
    std::ofstream(config) << run::to_yaml(cfg);
    std::vector<std::string> streams;
    for (const char* rep : {"a", "b"}) {
      const fs::path out = env.work / ("determinism_" + tag + "_" + rep);
      fs::remove_all(out);
      if (run_cli(env, "train --deterministic --config \"" + config.string() + "\" --out \"" + out.string() + "\"") !=
          0)
        return {false, "cmf train failed"};
      streams.push_back(slurp(out / "metrics.jsonl"));
    }
    const bool same = !streams[0].empty() && streams[0] == streams[1];
    ok = ok && same;
    detail += fmt("%s%s: %s", detail.empty() ? "" : "; ", tag.c_str(), same ? "identical" : "differ");
  }
  return {ok, "two moebius runs per estimator mode, 30 epochs, metrics.jsonl " + detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome(const Env&)>>> checks = {
      {"gradient_fidelity", gradient_fidelity},
      {"metric_correctness", metric_correctness},
      {"estimator_unbiasedness", estimator_unbiasedness},
      {"rnf_reduction", rnf_reduction},
      {"fuzzy_line", fuzzy_line},
      {"sphere", sphere},
      {"fid_suite", fid_suite},
      {"tabular_proxy", tabular_proxy},
      {"determinism", determinism},
  };

  CLI::App app{"Acceptance checks"};
  std::vector<std::string> selected;
  std::string configs = "configs", work = "acceptance_runs", cli;
  app.add_option("criteria", selected, "Criteria to run (default all)");
  app.add_option("--configs", configs, "Preset directory")->check(CLI::ExistingDirectory);
  app.add_option("--work", work, "Scratch directory for training runs");
  app.add_option("--cli", cli, "Path to the cmf executable");
  CLI11_PARSE(app, argc, argv);

  Env env{configs, work, cli};
  fs::create_directories(env.work);
  if (selected.empty())
    for (const auto& [name, fn] : checks) selected.push_back(name);

  int failed = 0;
  for (const auto& name : selected) {
    auto it = std::find_if(checks.begin(), checks.end(), [&](const auto& c) { return c.first == name; });
    if (it == checks.end()) {
      std::fprintf(stderr, "unknown criterion: %s\n", name.c_str());
      return 2;
    }
    Outcome r;
    try {
      r = it->second(env);
    } catch (const std::exception& e) {
      r = {false, std::string("error: ") + e.what()};
    }
    std::printf("%s %s: %s\n", r.pass ? "PASS" : "FAIL", name.c_str(), r.detail.c_str());
    std::fflush(stdout);
    failed += !r.pass;
  }
  return failed == 0 ? 0 : 1;
}
