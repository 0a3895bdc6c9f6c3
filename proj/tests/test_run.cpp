#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "cmf/checkpoint.hpp"
#include "cmf/error.hpp"
#include "cmf/run.hpp"
#include "json.hpp"

using namespace cmf;
namespace fs = std::filesystem;

namespace {

const char* kSmall = R"(
name: small
seed: 7
out_dir: unused
dataset: {kind: fuzzy_line, n: 200}
model:
  latent_dim: 2
  data_dim: 2
  h: {couplings: 2, hidden: [8]}
  f: {couplings: 2, hidden: [8]}
train:
  beta: 1.0
  gamma: 1.0
  lr: 1.0e-3
  epochs: 4
  batch_size: 64
)";

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cmf_test_run_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::string> config_errors(const std::string& text) {
  try {
    run::parse_config(text);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Config);
    std::vector<std::string> lines;
    std::istringstream in(e.what());
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
  }
  return {};
}

}  // namespace

TEST_CASE("config text round trip is lossless") {
  auto c = run::parse_config(kSmall);
  c.train.lr = 0.1;  // not exactly representable in short decimal form without care
  c.train.estimator.cg_tol = 1.0 / 3.0;
  c.eval.sweep_sizes = {1, 2};
  c.train.early_stop = training::EarlyStop{7};
  const std::string text = run::to_yaml(c);
  const auto back = run::parse_config(text);
  CHECK(run::to_yaml(back) == text);
  CHECK(back.train.lr == 0.1);
  CHECK(back.train.estimator.cg_tol == 1.0 / 3.0);
  CHECK(back.train.early_stop->patience == 7);
  CHECK(!back.train.anneal);
  CHECK(back.model.h.hidden == std::vector<int>{8});
  CHECK(back.seed == 7);
  CHECK(back.train.seed == 7);
}

TEST_CASE("config errors list every violation") {
  const auto errs = config_errors(R"(
seed: -3x
bogus: 1
model: {latent_dim: 3, data_dim: 2}
train: {lr: 0, gamma: -1, batch_size: 1.5}
)");
  CHECK(errs.size() == 6);
  auto has = [&](const std::string& s) {
    for (const auto& e : errs)
      if (e.find(s) != std::string::npos) return true;
    return false;
  };
  CHECK(has("bogus: unknown key"));
  CHECK(has("seed: expected an integer"));
  CHECK(has("train.batch_size: expected an integer"));
  CHECK(has("lr"));
  CHECK(has("gamma"));
  CHECK(has("latent_dim must not exceed"));
  CHECK(config_errors("[1, 2]").size() == 1);
  CHECK(config_errors("dataset: {kind: mnist}").size() == 1);
  CHECK_THROWS_AS(run::parse_config("a: [unclosed"), Error);
}

TEST_CASE("overrides") {
  const auto base = run::parse_config(kSmall);
  run::Overrides o;
  o.seed = 99;
  o.gamma = 0.0;
  o.beta = 3.0;
  o.threads = 4;
  o.out_dir = "elsewhere";
  const auto c = run::apply(base, o);
  CHECK(c.seed == 99);
  CHECK(c.train.seed == 99);
  CHECK(c.dataset.seed != base.dataset.seed);
  CHECK(c.train.gamma == 0.0);
  CHECK(c.train.beta == 3.0);
  CHECK(c.train.threads == 4);
  CHECK(c.out_dir == "elsewhere");
  o.deterministic = true;
  CHECK(run::apply(base, o).train.threads == 1);
  o.gamma = -1.0;
  CHECK_THROWS_AS(run::apply(base, o), Error);
}

TEST_CASE("train run writes a self-describing directory") {
  auto cfg = run::parse_config(kSmall);
  cfg.out_dir = scratch("train").string();
  std::vector<std::string> lines;
  cfg.log_every = 2;
  const auto summary = run::train_run(cfg, [&](const std::string& l) { lines.push_back(l); });
  CHECK(lines.size() == 3);  // epochs 0, 2, 3
  const fs::path dir = cfg.out_dir;
  for (const char* f : {"config.yaml", "metrics.jsonl", "report.json", "metadata.json", "training.json"}) {
    CHECK_MESSAGE(fs::exists(dir / f), f);
  }
  CHECK(fs::exists(run::run_checkpoint_path(cfg.out_dir)));

  std::ifstream metrics(dir / "metrics.jsonl");
  std::string line;
  int count = 0;
  while (std::getline(metrics, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["epoch"] == count);
    for (const char* k : {"log_prior", "logdet_h", "half_logdet_jtj", "recon", "offdiag_l1", "total_objective"}) {
      CHECK_MESSAGE(j["valid"].contains(k), k);
    }
    ++count;
  }
  CHECK(count == 4);

  const auto report = slurp(dir / "report.json");
  run::eval_run(cfg.out_dir);
  CHECK(slurp(dir / "report.json") == report);
  run::eval_run(cfg.out_dir, 3);
  CHECK(slurp(dir / "report.json") == report);
  CHECK(nlohmann::json::parse(report)["mean_loglik"] == summary.report.mean_loglik);

  const auto snap = run::load_config((dir / "config.yaml").string());
  CHECK(run::to_yaml(snap) == slurp(dir / "config.yaml"));
  const auto ck = checkpoint::load(run::run_checkpoint_path(cfg.out_dir));
  CHECK(ck.epoch == summary.result.best_epoch);
  fs::remove_all(dir);
}

TEST_CASE("same seed gives an identical metrics stream and report") {
  auto cfg = run::parse_config(kSmall);
  cfg.train.gamma = 0.0;
  cfg.out_dir = scratch("det_a").string();
  run::train_run(cfg);
  auto cfg2 = cfg;
  cfg2.out_dir = scratch("det_b").string();
  cfg2.train.threads = 2;
  run::train_run(cfg2);
  CHECK(slurp(fs::path(cfg.out_dir) / "metrics.jsonl") == slurp(fs::path(cfg2.out_dir) / "metrics.jsonl"));
  CHECK(slurp(fs::path(cfg.out_dir) / "report.json") == slurp(fs::path(cfg2.out_dir) / "report.json"));
  auto cfg3 = run::apply(cfg, run::Overrides{.seed = 8});
  cfg3.out_dir = scratch("det_c").string();
  run::train_run(cfg3);
  CHECK(slurp(fs::path(cfg.out_dir) / "metrics.jsonl") != slurp(fs::path(cfg3.out_dir) / "metrics.jsonl"));
  for (const auto& c : {cfg, cfg2, cfg3}) fs::remove_all(c.out_dir);
}

TEST_CASE("analyze on an identity model") {
  auto cfg = run::parse_config(kSmall);
  cfg.model.latent_dim = 2;
  cfg.model.data_dim = 3;
  cfg.dataset.kind = datasets::DatasetKind::Sphere;
  cfg.eval.sweep_sizes = {1, 2};
  const auto gf = run::build_model(cfg);
  const fs::path out = scratch("analyze");
  run::analyze(gf, cfg, out.string());
  const auto j = nlohmann::json::parse(slurp(out / "analysis.json"));
  CHECK(j["macs"] == 0.0);
  CHECK(j["diag_profile"] == std::vector<double>{1.0, 1.0});
  CHECK(j["abs_cosine"][0][1] == 0.0);
  CHECK(j["sweep"].size() == 2);

  // The k = d point scores an unrestricted sample drawn from the same stream.
  const auto splits = datasets::load(cfg.dataset);
  linalg::Rng rng = linalg::Rng(cfg.seed).split(5).split(2);
  const auto full = evalkit::restricted_sample(gf, {0, 1}, splits.test.rows(), rng);
  const double fid = evalkit::fid_like(evalkit::moments(splits.test), evalkit::moments(full));
  CHECK(j["sweep"][1]["fid_like"] == fid);
  const auto dump = datasets::read_csv((out / "restricted_k2.csv").string());
  CHECK(dump.header == std::vector<std::string>{"x0", "x1", "x2", "logp"});
  CHECK(dump.data.leftCols(3) == full);

  cfg.model.data_dim = 4;
  CHECK_THROWS_AS(run::analyze(gf, cfg, out.string()), Error);
  fs::remove_all(out);
}

TEST_CASE("sample dumps") {
  auto cfg = run::parse_config(kSmall);
  cfg.model.data_dim = 3;
  cfg.model.latent_dim = 2;
  const auto gf = run::build_model(cfg);
  const fs::path out = scratch("sample.csv");
  run::sample_to_csv(gf, 50, std::nullopt, 11, out.string());
  const auto t = datasets::read_csv(out.string());
  CHECK(t.data.rows() == 50);
  CHECK(t.header == std::vector<std::string>{"x0", "x1", "x2", "logp"});
  CHECK(t.data.col(2).isZero(0));  // identity chart pads with zeros
  const double log2pi = std::log(2.0 * std::numbers::pi);
  for (int i = 0; i < 50; ++i) {
    const double expect = -0.5 * t.data.row(i).head(2).squaredNorm() - log2pi;
    CHECK(t.data(i, 3) == doctest::Approx(expect).epsilon(1e-12));
  }
  run::sample_to_csv(gf, 50, std::nullopt, 11, out.string() + "2");
  CHECK(slurp(out) == slurp(out.string() + "2"));
  run::sample_to_csv(gf, 20, std::vector<int>{1}, 11, out.string());
  CHECK(datasets::read_csv(out.string()).data.col(0).isZero(0));
  CHECK_THROWS_AS(run::sample_to_csv(gf, 0, std::nullopt, 1, out.string()), Error);
  fs::remove(out);
  fs::remove(out.string() + "2");
}

TEST_CASE("export") {
  auto cfg = run::parse_config(kSmall);
  cfg.out_dir = scratch("export_run").string();
  run::train_run(cfg);
  const fs::path out = scratch("export_out");
  run::export_run(cfg.out_dir, out.string());
  const auto curves = datasets::read_csv((out / "curves.csv").string());
  CHECK(curves.data.rows() == 4);
  CHECK(curves.header.front() == "epoch");
  const auto model = nlohmann::json::parse(slurp(out / "model.json"));
  const auto ck = checkpoint::load(run::run_checkpoint_path(cfg.out_dir));
  const auto hp = model["h"]["params"].get<std::vector<double>>();
  const auto want = ck.model.h().params();
  CHECK(std::equal(hp.begin(), hp.end(), want.begin(), want.end()));
  CHECK(model["f"]["layers"].size() == ck.model.f().layers().size());
  fs::remove_all(out);
  fs::remove_all(cfg.out_dir);
}
