#include "cmf/run.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "cmf/checkpoint.hpp"
#include "cmf/error.hpp"
#include "cmf/metric.hpp"
#include "json.hpp"

namespace cmf::run {

namespace fs = std::filesystem;
using linalg::Matrix;
using linalg::Vector;
using nlohmann::ordered_json;

namespace {

// Streams derived from the run seed. Training consumes Rng(seed) splits 1
// and 2 internally.
constexpr std::uint64_t kInitStream = 3;
constexpr std::uint64_t kEvalStream = 4;
constexpr std::uint64_t kSweepStream = 5;
constexpr std::uint64_t kDumpStream = 6;
constexpr std::uint64_t kDataStream = 10;

std::uint64_t data_seed(std::uint64_t seed) { return linalg::Rng(seed).split(kDataStream).seed(); }

// ---------------------------------------------------------------------------
// YAML input
// ---------------------------------------------------------------------------

template <typename T>
const char* type_name() {
  if constexpr (std::is_same_v<T, bool>) return "a boolean";
  else if constexpr (std::is_same_v<T, std::string>) return "a string";
  else if constexpr (std::is_same_v<T, std::vector<int>>) return "a list of integers";
  else if constexpr (std::is_integral_v<T>) return "an integer";
  else return "a number";
}

class Reader {
 public:
  std::vector<std::string> errors;

  // False (with an error) unless node is a map; unknown keys are reported.
  bool map(const YAML::Node& node, const std::string& path, std::initializer_list<const char*> keys) {
    if (!node.IsMap()) {
      errors.push_back((path.empty() ? "config" : path) + ": expected a mapping");
      return false;
    }
    const std::set<std::string> allowed(keys.begin(), keys.end());
    for (const auto& kv : node) {
      const auto key = kv.first.as<std::string>();
      if (!allowed.count(key)) errors.push_back(join(path, key) + ": unknown key");
    }
    return true;
  }

  template <typename T>
  void get(const YAML::Node& node, const std::string& path, const char* key, T& out) {
    const YAML::Node v = node[key];
    if (!v.IsDefined() || v.IsNull()) return;
    try {
      if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        // yaml-cpp accepts "1.5" as an int on some inputs; insist on an integer literal.
        const auto s = v.as<std::string>();
        T parsed{};
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), parsed);
        if (ec != std::errc() || ptr != s.data() + s.size()) throw YAML::Exception(YAML::Mark(), "int");
        out = parsed;
      } else {
        out = v.as<T>();
      }
    } catch (const YAML::Exception&) {
      errors.push_back(join(path, key) + ": expected " + type_name<T>());
    }
  }

  static std::string join(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
  }
};

void read_flow(Reader& r, const YAML::Node& n, const std::string& path, flownet::FlowSpec& f) {
  if (!r.map(n, path, {"couplings", "hidden", "scale_clamp"})) return;
  r.get(n, path, "couplings", f.couplings);
  r.get(n, path, "hidden", f.hidden);
  r.get(n, path, "scale_clamp", f.scale_clamp);
}

RunConfig from_yaml(const YAML::Node& root, Reader& r) {
  RunConfig c;
  if (!r.map(root, "", {"name", "seed", "dataset", "model", "train", "eval", "log_every",
                              "deterministic", "out_dir"})) {
    return c;
  }
  r.get(root, "", "name", c.name);
  r.get(root, "", "seed", c.seed);
  r.get(root, "", "log_every", c.log_every);
  r.get(root, "", "deterministic", c.deterministic);
  r.get(root, "", "out_dir", c.out_dir);

  if (const auto d = root["dataset"]; d.IsDefined()) {
    if (r.map(d, "dataset", {"kind", "n", "train_frac", "valid_frac", "test_frac", "csv_path", "standardize",
                             "moebius_half_width"})) {
      std::string kind = datasets::to_string(c.dataset.kind);
      r.get(d, "dataset", "kind", kind);
      try {
        c.dataset.kind = datasets::kind_from_string(kind);
      } catch (const Error& e) {
        r.errors.push_back(std::string("dataset.kind: ") + e.what());
      }
      r.get(d, "dataset", "n", c.dataset.n);
      r.get(d, "dataset", "train_frac", c.dataset.train_frac);
      r.get(d, "dataset", "valid_frac", c.dataset.valid_frac);
      r.get(d, "dataset", "test_frac", c.dataset.test_frac);
      r.get(d, "dataset", "csv_path", c.dataset.csv_path);
      r.get(d, "dataset", "standardize", c.dataset.standardize);
      r.get(d, "dataset", "moebius_half_width", c.dataset.moebius_half_width);
    }
  }

  if (const auto m = root["model"]; m.IsDefined()) {
    if (r.map(m, "model", {"latent_dim", "data_dim", "h", "f"})) {
      r.get(m, "model", "latent_dim", c.model.latent_dim);
      r.get(m, "model", "data_dim", c.model.data_dim);
      if (m["h"].IsDefined()) read_flow(r, m["h"], "model.h", c.model.h);
      if (m["f"].IsDefined()) read_flow(r, m["f"], "model.f", c.model.f);
    }
  }

  if (const auto t = root["train"]; t.IsDefined()) {
    auto& tc = c.train;
    if (r.map(t, "train", {"beta", "gamma", "lr", "epochs", "batch_size", "anneal", "estimator", "early_stop",
                           "threads", "clip_norm", "diagnostics"})) {
      r.get(t, "train", "beta", tc.beta);
      r.get(t, "train", "gamma", tc.gamma);
      r.get(t, "train", "lr", tc.lr);
      r.get(t, "train", "epochs", tc.epochs);
      r.get(t, "train", "batch_size", tc.batch_size);
      r.get(t, "train", "threads", tc.threads);
      r.get(t, "train", "clip_norm", tc.clip_norm);
      r.get(t, "train", "diagnostics", tc.diagnostics);
      if (const auto a = t["anneal"]; a.IsDefined() && !a.IsNull()) {
        training::AnnealSchedule s;
        if (r.map(a, "train.anneal", {"start_epoch", "end_epoch"})) {
          r.get(a, "train.anneal", "start_epoch", s.start_epoch);
          r.get(a, "train.anneal", "end_epoch", s.end_epoch);
        }
        tc.anneal = s;
      }
      if (const auto e = t["early_stop"]; e.IsDefined() && !e.IsNull()) {
        training::EarlyStop s;
        if (r.map(e, "train.early_stop", {"patience"})) r.get(e, "train.early_stop", "patience", s.patience);
        tc.early_stop = s;
      }
      if (const auto e = t["estimator"]; e.IsDefined()) {
        if (r.map(e, "train.estimator", {"mode", "probes", "cg_tol", "preconditioner"})) {
          std::string mode = metric::to_string(tc.estimator.mode);
          r.get(e, "train.estimator", "mode", mode);
          try {
            tc.estimator.mode = metric::estimator_mode_from_string(mode);
          } catch (const Error& err) {
            r.errors.push_back(std::string("train.estimator.mode: ") + err.what());
          }
          r.get(e, "train.estimator", "probes", tc.estimator.probes);
          r.get(e, "train.estimator", "cg_tol", tc.estimator.cg_tol);
          std::string pre = linalg::kCgPreconditioner;
          r.get(e, "train.estimator", "preconditioner", pre);
          if (pre != linalg::kCgPreconditioner) {
            r.errors.push_back("train.estimator.preconditioner: only 'none' is supported");
          }
        }
      }
    }
  }

  if (const auto e = root["eval"]; e.IsDefined()) {
    if (r.map(e, "eval", {"sweep_sizes", "sample_count", "diagnostic_rows"})) {
      r.get(e, "eval", "sweep_sizes", c.eval.sweep_sizes);
      r.get(e, "eval", "sample_count", c.eval.sample_count);
      r.get(e, "eval", "diagnostic_rows", c.eval.diagnostic_rows);
    }
  }
  c.dataset.seed = data_seed(c.seed);
  c.train.seed = c.seed;
  return c;
}

[[noreturn]] void throw_config(const std::vector<std::string>& errors) {
  std::string msg = "invalid configuration (" + std::to_string(errors.size()) + " problem" +
                    (errors.size() == 1 ? "" : "s") + ")";
  for (const auto& e : errors) msg += "\n  " + e;
  throw Error(ErrorCode::Config, msg);
}

// ---------------------------------------------------------------------------
// YAML output
// ---------------------------------------------------------------------------

std::string num(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, res.ptr);
  // Keep floats recognisable as floats.
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    out += ch;
  }
  return out + "\"";
}

std::string int_list(const std::vector<int>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s + "]";
}

void write_flow(std::ostream& o, const char* name, const flownet::FlowSpec& f) {
  o << "  " << name << ":\n"
    << "    couplings: " << f.couplings << "\n"
    << "    hidden: " << int_list(f.hidden) << "\n"
    << "    scale_clamp: " << num(f.scale_clamp) << "\n";
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::Io, "write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void make_dirs(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw Error(ErrorCode::Io, "cannot create " + p.string() + ": " + ec.message());
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<double> to_vec(const Vector& v) { return {v.data(), v.data() + v.size()}; }

ordered_json matrix_json(const Matrix& m) {
  ordered_json rows = ordered_json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(to_vec(m.row(i).transpose()));
  return rows;
}

ordered_json breakdown_obj(const training::LossBreakdown& b) {
  ordered_json j;
  j["log_prior"] = b.log_prior;
  j["logdet_h"] = b.logdet_h;
  j["half_logdet_jtj"] = b.half_logdet_jtj;
  j["recon"] = b.recon;
  j["offdiag_l1"] = b.offdiag_l1;
  j["total_objective"] = b.total_objective;
  j["anneal_weight"] = b.anneal_weight;
  j["log_likelihood"] = b.log_likelihood();
  return j;
}

std::vector<std::string> sample_header(int D) {
  std::vector<std::string> h;
  for (int i = 0; i < D; ++i) h.push_back("x" + std::to_string(i));
  h.push_back("logp");
  return h;
}

void write_dump(const std::string& path, const injective::InjectiveFlow& gf, const Matrix& x, int threads) {
  Matrix out(x.rows(), x.cols() + 1);
  out.leftCols(x.cols()) = x;
  out.col(x.cols()) = evalkit::loglik_rows(gf, x, threads);
  datasets::write_csv(path, sample_header(static_cast<int>(x.cols())), out);
}

Matrix diagnostic_latents(const injective::InjectiveFlow& gf, const RunConfig& cfg, const Matrix& test) {
  const Eigen::Index rows = std::min<Eigen::Index>(cfg.eval.diagnostic_rows, test.rows());
  return gf.project_rows(test.topRows(rows));
}

std::vector<int> sweep_sizes(const RunConfig& cfg) {
  return cfg.eval.sweep_sizes.empty() ? evalkit::default_sweep_sizes(cfg.model.latent_dim) : cfg.eval.sweep_sizes;
}

ordered_json flow_json(const flownet::FlowModule& flow) {
  ordered_json j;
  j["dim"] = flow.dim();
  ordered_json layers = ordered_json::array();
  for (const auto& layer : flow.layers()) {
    ordered_json l;
    if (const auto* c = std::get_if<flownet::AffineCoupling>(&layer)) {
      l["type"] = "coupling";
      l["mask"] = std::vector<int>(c->mask.begin(), c->mask.end());
      l["scale_clamp"] = c->scale_clamp;
      l["scale_widths"] = c->scale_net.widths;
      l["shift_widths"] = c->shift_net.widths;
    } else {
      l["type"] = "permutation";
      l["perm"] = std::get<flownet::Permutation>(layer).perm;
    }
    layers.push_back(l);
  }
  j["layers"] = layers;
  j["params"] = flow.params();
  return j;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

std::vector<std::string> validate(const RunConfig& cfg) {
  std::vector<std::string> errs = datasets::validate(cfg.dataset);
  for (const auto& e : training::validate(cfg.train)) errs.push_back(e);
  const auto& m = cfg.model;
  if (m.latent_dim < 1) errs.push_back("model.latent_dim must be >= 1");
  if (m.data_dim < 1) errs.push_back("model.data_dim must be >= 1");
  if (m.latent_dim > m.data_dim) errs.push_back("model.latent_dim must not exceed model.data_dim");
  try {
    if (datasets::validate(cfg.dataset).empty() && datasets::data_dim(cfg.dataset) != m.data_dim) {
      errs.push_back("model.data_dim (" + std::to_string(m.data_dim) + ") does not match the dataset (" +
                     std::to_string(datasets::data_dim(cfg.dataset)) + ")");
    }
  } catch (const Error& e) {
    errs.push_back(std::string("dataset: ") + e.what());
  }
  for (const auto& [name, f] : {std::pair{"model.h", &m.h}, std::pair{"model.f", &m.f}}) {
    if (f->couplings < 0) errs.push_back(std::string(name) + ".couplings must be >= 0");
    for (int w : f->hidden) {
      if (w < 1) {
        errs.push_back(std::string(name) + ".hidden widths must be >= 1");
        break;
      }
    }
    if (!(f->scale_clamp > 0)) errs.push_back(std::string(name) + ".scale_clamp must be > 0");
  }
  for (int k : cfg.eval.sweep_sizes) {
    if (k < 1 || k > m.latent_dim) {
      errs.push_back("eval.sweep_sizes entries must lie in [1, latent_dim]");
      break;
    }
  }
  if (cfg.eval.sample_count < 0) errs.push_back("eval.sample_count must be >= 0");
  if (cfg.eval.diagnostic_rows < 1) errs.push_back("eval.diagnostic_rows must be >= 1");
  if (cfg.log_every < 0) errs.push_back("log_every must be >= 0");
  if (cfg.out_dir.empty()) errs.push_back("out_dir must not be empty");
  return errs;
}

RunConfig parse_config(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw Error(ErrorCode::Config, std::string("invalid configuration: ") + e.what());
  }
  Reader r;
  RunConfig c = from_yaml(root, r);
  for (const auto& e : validate(c)) r.errors.push_back(e);
  if (!r.errors.empty()) throw_config(r.errors);
  return c;
}

RunConfig load_config(const std::string& path) {
  const std::string text = read_text(path);
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw Error(ErrorCode::Config, path + ": " + e.what());
  }
  // Relative csv paths are resolved against the config file's directory.
  if (root.IsMap() && root["dataset"].IsMap() && root["dataset"]["csv_path"].IsScalar()) {
    const fs::path p = root["dataset"]["csv_path"].as<std::string>();
    if (!p.empty() && p.is_relative()) {
      root["dataset"]["csv_path"] = (fs::absolute(path).parent_path() / p).lexically_normal().string();
    }
  }
  Reader r;
  RunConfig c = from_yaml(root, r);
  for (const auto& e : validate(c)) r.errors.push_back(e);
  if (!r.errors.empty()) throw_config(r.errors);
  return c;
}

std::string to_yaml(const RunConfig& c) {
  std::ostringstream o;
  o << "name: " << quoted(c.name) << "\n"
    << "seed: " << c.seed << "\n"
    << "out_dir: " << quoted(c.out_dir) << "\n"
    << "log_every: " << c.log_every << "\n"
    << "deterministic: " << (c.deterministic ? "true" : "false") << "\n";
  const auto& d = c.dataset;
  o << "dataset:\n"
    << "  kind: " << datasets::to_string(d.kind) << "\n"
    << "  n: " << d.n << "\n"
    << "  train_frac: " << num(d.train_frac) << "\n"
    << "  valid_frac: " << num(d.valid_frac) << "\n"
    << "  test_frac: " << num(d.test_frac) << "\n"
    << "  csv_path: " << quoted(d.csv_path) << "\n"
    << "  standardize: " << (d.standardize ? "true" : "false") << "\n"
    << "  moebius_half_width: " << num(d.moebius_half_width) << "\n";
  o << "model:\n"
    << "  latent_dim: " << c.model.latent_dim << "\n"
    << "  data_dim: " << c.model.data_dim << "\n";
  write_flow(o, "h", c.model.h);
  write_flow(o, "f", c.model.f);
  const auto& t = c.train;
  o << "train:\n"
    << "  beta: " << num(t.beta) << "\n"
    << "  gamma: " << num(t.gamma) << "\n"
    << "  lr: " << num(t.lr) << "\n"
    << "  epochs: " << t.epochs << "\n"
    << "  batch_size: " << t.batch_size << "\n";
  if (t.anneal) {
    o << "  anneal:\n"
      << "    start_epoch: " << t.anneal->start_epoch << "\n"
      << "    end_epoch: " << t.anneal->end_epoch << "\n";
  } else {
    o << "  anneal: null\n";
  }
  o << "  estimator:\n"
    << "    mode: " << metric::to_string(t.estimator.mode) << "\n"
    << "    probes: " << t.estimator.probes << "\n"
    << "    cg_tol: " << num(t.estimator.cg_tol) << "\n"
    << "    preconditioner: " << linalg::kCgPreconditioner << "\n";
  if (t.early_stop) {
    o << "  early_stop:\n"
      << "    patience: " << t.early_stop->patience << "\n";
  } else {
    o << "  early_stop: null\n";
  }
  o << "  threads: " << t.threads << "\n"
    << "  clip_norm: " << num(t.clip_norm) << "\n"
    << "  diagnostics: " << (t.diagnostics ? "true" : "false") << "\n";
  o << "eval:\n"
    << "  sweep_sizes: " << int_list(c.eval.sweep_sizes) << "\n"
    << "  sample_count: " << c.eval.sample_count << "\n"
    << "  diagnostic_rows: " << c.eval.diagnostic_rows << "\n";
  return o.str();
}

RunConfig apply(RunConfig cfg, const Overrides& o) {
  if (o.seed) cfg.seed = *o.seed;
  if (o.gamma) cfg.train.gamma = *o.gamma;
  if (o.beta) cfg.train.beta = *o.beta;
  if (o.threads) cfg.train.threads = *o.threads;
  if (o.out_dir) cfg.out_dir = *o.out_dir;
  if (o.deterministic) cfg.deterministic = true;
  if (cfg.deterministic) cfg.train.threads = 1;
  cfg.dataset.seed = data_seed(cfg.seed);
  cfg.train.seed = cfg.seed;
  if (const auto errs = validate(cfg); !errs.empty()) throw_config(errs);
  return cfg;
}

injective::InjectiveFlow build_model(const RunConfig& cfg) {
  injective::InjectiveSpec spec;
  spec.latent_dim = cfg.model.latent_dim;
  spec.data_dim = cfg.model.data_dim;
  spec.h = cfg.model.h;
  spec.f = cfg.model.f;
  auto gf = injective::InjectiveFlow::build(spec);
  linalg::Rng rng = linalg::Rng(cfg.seed).split(kInitStream);
  gf.init_identity(rng);
  return gf;
}

// ---------------------------------------------------------------------------
// JSON records
// ---------------------------------------------------------------------------

std::string breakdown_json(const training::LossBreakdown& b) { return breakdown_obj(b).dump(); }

std::string epoch_json(const training::EpochRecord& r) {
  ordered_json j;
  j["epoch"] = r.epoch;
  j["train"] = breakdown_obj(r.train);
  j["valid"] = breakdown_obj(r.valid);
  j["grad_norm"] = r.grad_norm;
  j["clipped_steps"] = r.clipped_steps;
  j["cg_converged"] = r.cg_converged;
  j["cg_iterations"] = r.cg_iterations;
  j["macs"] = r.macs;
  j["diag_profile"] = to_vec(r.diag_profile);
  return j.dump();
}

std::string run_checkpoint_path(const std::string& run_dir) {
  return (fs::path(run_dir) / "checkpoints" / "best.ckpt").string();
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

evalkit::EvalReport evaluate_model(const injective::InjectiveFlow& gf, const RunConfig& cfg,
                                   const datasets::Splits& splits) {
  const Matrix& test = splits.test;
  if (test.rows() < 2) throw Error(ErrorCode::InvalidArgument, "evaluation needs at least two test rows");
  evalkit::EvalReport r;
  training::LossOptions opts;
  opts.beta = cfg.train.beta;
  opts.gamma = cfg.train.gamma;
  opts.threads = cfg.train.threads;
  r.mean_loglik = training::evaluate(gf, test, opts).log_likelihood();
  const Matrix z = diagnostic_latents(gf, cfg, test);
  r.macs = training::mean_macs(gf, z);
  r.diag_profile = metric::diag_profile(z, gf);
  r.prominent_order = evalkit::prominent_dims(r.diag_profile, cfg.model.latent_dim);
  const Eigen::Index n = cfg.eval.sample_count > 0 ? cfg.eval.sample_count : test.rows();
  std::vector<int> all(cfg.model.latent_dim);
  std::iota(all.begin(), all.end(), 0);
  linalg::Rng rng = linalg::Rng(cfg.seed).split(kEvalStream);
  r.fid_like = evalkit::fid_like(evalkit::moments(test), evalkit::moments(evalkit::restricted_sample(gf, all, n, rng)));
  return r;
}

namespace {

std::string report_json(const injective::InjectiveFlow& gf, const RunConfig& cfg, const datasets::Splits& splits,
                        const evalkit::EvalReport& r) {
  training::LossOptions opts;
  opts.beta = cfg.train.beta;
  opts.gamma = cfg.train.gamma;
  opts.threads = cfg.train.threads;
  ordered_json j;
  j["name"] = cfg.name;
  j["seed"] = cfg.seed;
  j["test_rows"] = splits.test.rows();
  j["test"] = breakdown_obj(training::evaluate(gf, splits.test, opts));
  j["mean_loglik"] = r.mean_loglik;
  j["macs"] = r.macs;
  j["diag_profile"] = to_vec(r.diag_profile);
  j["prominent_order"] = r.prominent_order;
  j["fid_like"] = r.fid_like;
  return j.dump(2) + "\n";
}

ordered_json metadata(const RunConfig& cfg) {
  ordered_json m;
  m["rng"] = linalg::Rng::algorithm();
  m["cg_preconditioner"] = linalg::kCgPreconditioner;
  m["threads"] = cfg.train.threads;
  m["deterministic"] = cfg.deterministic;
  m["seed"] = cfg.seed;
  m["data_seed"] = cfg.dataset.seed;
  return m;
}

}  // namespace

TrainSummary train_run(const RunConfig& cfg, const LogFn& log) {
  if (const auto errs = validate(cfg); !errs.empty()) throw_config(errs);
  const fs::path dir = cfg.out_dir;
  make_dirs(dir / "checkpoints");
  write_text(dir / "config.yaml", to_yaml(cfg));
  ordered_json meta = metadata(cfg);
  meta["started_at"] = utc_now();
  write_text(dir / "metadata.json", meta.dump(2) + "\n");

  const datasets::Splits splits = datasets::load(cfg.dataset);
  auto gf = build_model(cfg);

  std::ofstream metrics(dir / "metrics.jsonl");
  if (!metrics) throw Error(ErrorCode::Io, "cannot write " + (dir / "metrics.jsonl").string());
  TrainSummary out;
  out.result = training::train(gf, splits.train, splits.valid, cfg.train, [&](const training::EpochRecord& r) {
    metrics << epoch_json(r) << '\n';
    metrics.flush();
    if (log && cfg.log_every > 0 && (r.epoch % cfg.log_every == 0 || r.epoch + 1 == cfg.train.epochs)) {
      char line[256];
      std::snprintf(line, sizeof(line), "epoch %d  train %.5f  valid %.5f  loglik %.5f  recon %.5f  macs %.4f",
                    r.epoch, r.train.total_objective, r.valid.total_objective, r.valid.log_likelihood(),
                    r.valid.recon, r.macs);
      log(line);
    }
  });
  metrics.close();
  if (!metrics) throw Error(ErrorCode::Io, "write failed: " + (dir / "metrics.jsonl").string());

  const auto& res = out.result;
  checkpoint::Checkpoint ck{gf, cfg.seed, res.best_epoch};
  if (res.best_epoch >= 0) checkpoint::save(run_checkpoint_path(dir.string()), ck);

  ordered_json summary;
  summary["epochs_run"] = res.history.size();
  summary["best_epoch"] = res.best_epoch;
  summary["best_valid"] = res.best_valid;
  summary["diverged"] = res.diverged;
  summary["early_stopped"] = res.early_stopped;
  int clipped = 0;
  for (const auto& h : res.history) clipped += h.clipped_steps;
  summary["clipped_steps"] = clipped;
  if (res.diverged) summary["error"] = res.error;
  write_text(dir / "training.json", summary.dump(2) + "\n");

  if (res.diverged) {
    meta["finished_at"] = utc_now();
    write_text(dir / "metadata.json", meta.dump(2) + "\n");
    throw Error(ErrorCode::NonFinite, "training diverged: " + res.error);
  }

  out.report = evaluate_model(gf, cfg, splits);
  write_text(dir / "report.json", report_json(gf, cfg, splits, out.report));
  meta["finished_at"] = utc_now();
  write_text(dir / "metadata.json", meta.dump(2) + "\n");
  return out;
}

evalkit::EvalReport eval_run(const std::string& run_dir, int threads) {
  RunConfig cfg = load_config((fs::path(run_dir) / "config.yaml").string());
  if (threads > 0) cfg.train.threads = threads;
  const auto ck = checkpoint::load(run_checkpoint_path(run_dir));
  const datasets::Splits splits = datasets::load(cfg.dataset);
  const auto report = evaluate_model(ck.model, cfg, splits);
  write_text(fs::path(run_dir) / "report.json", report_json(ck.model, cfg, splits, report));
  return report;
}

void analyze(const injective::InjectiveFlow& gf, const RunConfig& cfg, const std::string& out_dir) {
  if (gf.latent_dim() != cfg.model.latent_dim || gf.data_dim() != cfg.model.data_dim) {
    throw Error(ErrorCode::DimensionMismatch, "checkpoint dimensions do not match the configuration");
  }
  make_dirs(out_dir);
  const fs::path dir = out_dir;
  const int threads = cfg.train.threads;
  const datasets::Splits splits = datasets::load(cfg.dataset);
  const Matrix& test = splits.test;
  const int d = gf.latent_dim();

  const Matrix z = diagnostic_latents(gf, cfg, test);
  const auto js = metric::jacobians(gf, z);
  Matrix cos_sum = Matrix::Zero(d, d), g_sum = Matrix::Zero(d, d);
  double macs_sum = 0.0;
  for (const auto& j : js) {
    cos_sum += metric::abs_cosine_matrix(j);
    g_sum += (j.transpose() * j).cwiseAbs();
    macs_sum += metric::macs(j);
  }
  const double rows = static_cast<double>(js.size());
  const Vector profile = metric::diag_profile(z, gf);

  const auto ks = sweep_sizes(cfg);
  linalg::Rng sweep_rng = linalg::Rng(cfg.seed).split(kSweepStream);
  const auto sweep = evalkit::prominent_sweep(gf, test, profile, ks, sweep_rng);

  ordered_json j;
  j["latent_dim"] = d;
  j["data_dim"] = gf.data_dim();
  j["rows"] = js.size();
  j["macs"] = macs_sum / rows;
  j["diag_profile"] = to_vec(profile);
  j["prominent_order"] = evalkit::prominent_dims(profile, d);
  j["abs_cosine"] = matrix_json(cos_sum / rows);
  j["mean_abs_metric"] = matrix_json(g_sum / rows);
  ordered_json sj = ordered_json::array();
  for (const auto& p : sweep) {
    ordered_json e;
    e["k"] = p.k;
    e["dims"] = p.dims;
    e["fid_like"] = p.fid_like;
    e["mse"] = p.mse;
    e["samples"] = "restricted_k" + std::to_string(p.k) + ".csv";
    sj.push_back(e);
  }
  j["sweep"] = sj;
  write_text(dir / "analysis.json", j.dump(2) + "\n");

  write_dump((dir / "data.csv").string(), gf, test, threads);
  std::vector<int> all(d);
  std::iota(all.begin(), all.end(), 0);
  const Eigen::Index n = cfg.eval.sample_count > 0 ? cfg.eval.sample_count : test.rows();
  linalg::Rng dump_rng = linalg::Rng(cfg.seed).split(kDumpStream);
  write_dump((dir / "samples.csv").string(), gf, evalkit::restricted_sample(gf, all, n, dump_rng), threads);
  // Same streams as the sweep, so each dump is the sample set that was scored.
  for (const auto& p : sweep) {
    linalg::Rng rng = sweep_rng.split(static_cast<std::uint64_t>(p.k));
    write_dump((dir / ("restricted_k" + std::to_string(p.k) + ".csv")).string(), gf,
               evalkit::restricted_sample(gf, p.dims, test.rows(), rng), threads);
  }
}

void analyze_run(const std::string& run_dir, const std::string& out_dir, int threads) {
  RunConfig cfg = load_config((fs::path(run_dir) / "config.yaml").string());
  if (threads > 0) cfg.train.threads = threads;
  const auto ck = checkpoint::load(run_checkpoint_path(run_dir));
  analyze(ck.model, cfg, out_dir);
}

void sample_to_csv(const injective::InjectiveFlow& gf, int n, const std::optional<std::vector<int>>& dims,
                   std::uint64_t seed, const std::string& path) {
  if (n < 1) throw Error(ErrorCode::InvalidArgument, "sample: n must be >= 1");
  std::vector<int> use;
  if (dims) {
    use = *dims;
  } else {
    use.resize(gf.latent_dim());
    std::iota(use.begin(), use.end(), 0);
  }
  linalg::Rng rng(seed);
  write_dump(path, gf, evalkit::restricted_sample(gf, use, n, rng), 1);
}

void export_run(const std::string& run_dir, const std::string& out_dir) {
  const fs::path dir = run_dir;
  make_dirs(out_dir);
  std::ifstream in(dir / "metrics.jsonl");
  if (!in) throw Error(ErrorCode::Io, "cannot open " + (dir / "metrics.jsonl").string());
  const std::vector<std::string> fields{"log_prior", "logdet_h", "half_logdet_jtj", "recon",
                                        "offdiag_l1", "total_objective", "log_likelihood"};
  std::vector<std::string> header{"epoch", "anneal_weight"};
  for (const char* split : {"train", "valid"})
    for (const auto& f : fields) header.push_back(std::string(split) + "_" + f);
  header.insert(header.end(), {"grad_norm", "clipped_steps", "macs"});
  std::vector<std::vector<double>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
      std::vector<double> row{j.at("epoch").get<double>(), j.at("train").at("anneal_weight").get<double>()};
      for (const char* split : {"train", "valid"})
        for (const auto& f : fields) row.push_back(j.at(split).at(f).get<double>());
      row.push_back(j.at("grad_norm").get<double>());
      row.push_back(j.at("clipped_steps").get<double>());
      row.push_back(j.at("macs").get<double>());
      rows.push_back(std::move(row));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Parse, "metrics.jsonl line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  Matrix curves(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(header.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = 0; k < header.size(); ++k) curves(i, k) = rows[i][k];
  datasets::write_csv((fs::path(out_dir) / "curves.csv").string(), header, curves);

  const auto ck = checkpoint::load(run_checkpoint_path(run_dir));
  ordered_json m;
  m["latent_dim"] = ck.model.latent_dim();
  m["data_dim"] = ck.model.data_dim();
  m["seed"] = ck.seed;
  m["epoch"] = ck.epoch;
  m["h"] = flow_json(ck.model.h());
  m["f"] = flow_json(ck.model.f());
  write_text(fs::path(out_dir) / "model.json", m.dump(2) + "\n");
}

}  // namespace cmf::run
