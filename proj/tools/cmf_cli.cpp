// Command-line front end. Uses the C API only.

#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cmf/cmf.h"

namespace {

int report(cmf_status s) {
  if (s != CMF_OK) std::fprintf(stderr, "error (%s): %s\n", cmf_status_name(s), cmf_last_error());
  return cmf_exit_code(s);
}

void print_line(const char* line, void*) {
  std::printf("%s\n", line);
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Injective normalizing flows with a sparse, orthogonal latent metric"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(cmf_version()));

  std::string config, run_dir, out, checkpoint, dims;
  std::uint64_t seed = 0;
  double gamma = 0.0, beta = 0.0;
  int threads = 0, n = 0;
  bool deterministic = false;

  auto* train = app.add_subcommand("train", "Train a model from a config file");
  train->add_option("--config", config, "YAML run configuration")->required()->check(CLI::ExistingFile);
  auto* seed_opt = train->add_option("--seed", seed, "Master seed");
  auto* gamma_opt = train->add_option("--gamma", gamma, "Off-diagonal penalty weight (0 = RNF)");
  auto* beta_opt = train->add_option("--beta", beta, "Reconstruction weight");
  train->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  train->add_flag("--deterministic", deterministic, "Single worker");
  train->add_option("--out", out, "Run directory (overrides out_dir)");

  auto* check = app.add_subcommand("check", "Validate a config file and list every problem");
  check->add_option("--config", config, "YAML run configuration")->required()->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "Recompute report.json for a run directory");
  eval->add_option("--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  auto* analyze = app.add_subcommand("analyze", "Metric diagnostics, prominent-dimension sweep and sample dumps");
  auto* analyze_run = analyze->add_option("--run", run_dir, "Run directory")->check(CLI::ExistingDirectory);
  auto* analyze_ck = analyze->add_option("--checkpoint", checkpoint, "Checkpoint file")->check(CLI::ExistingFile);
  auto* analyze_cfg = analyze->add_option("--config", config, "Config for --checkpoint")->check(CLI::ExistingFile);
  analyze_run->excludes(analyze_ck);
  analyze_ck->needs(analyze_cfg);
  analyze->add_option("--out", out, "Output directory (default <run>/analysis)");
  analyze->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  auto* sample = app.add_subcommand("sample", "Draw samples to CSV (x0..xD-1,logp)");
  sample->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  sample->add_option("--n", n, "Number of samples")->required()->check(CLI::PositiveNumber);
  sample->add_option("--dims", dims, "Comma-separated latent indices to keep (default all)");
  sample->add_option("--seed", seed, "Sampling seed");
  sample->add_option("--out", out, "Output CSV")->required();

  auto* exp = app.add_subcommand("export", "Write curves.csv and model.json from a run directory");
  exp->add_option("--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  exp->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (*train) {
    cmf_overrides o;
    cmf_overrides_init(&o);
    if (*seed_opt) {
      o.has_seed = 1;
      o.seed = seed;
    }
    if (*gamma_opt) {
      o.has_gamma = 1;
      o.gamma = gamma;
    }
    if (*beta_opt) {
      o.has_beta = 1;
      o.beta = beta;
    }
    o.threads = threads;
    o.deterministic = deterministic ? 1 : 0;
    if (!out.empty()) o.out_dir = out.c_str();
    char dir[4096];
    if (cmf_status s = cmf_config_out_dir(config.c_str(), &o, dir, sizeof(dir)); s != CMF_OK) return report(s);
    const cmf_status s = cmf_run_train(config.c_str(), &o, print_line, nullptr);
    if (s == CMF_OK) std::printf("run directory: %s\n", dir);
    return report(s);
  }
  if (*check) {
    const cmf_status s = cmf_config_check(config.c_str());
    if (s == CMF_OK) std::printf("%s: ok\n", config.c_str());
    return report(s);
  }
  if (*eval) return report(cmf_run_eval(run_dir.c_str(), threads));
  if (*analyze) {
    if (!run_dir.empty()) {
      if (out.empty()) out = run_dir + "/analysis";
      return report(cmf_run_analyze(run_dir.c_str(), out.c_str(), threads));
    }
    if (checkpoint.empty() || out.empty()) {
      std::fprintf(stderr, "analyze: give --run, or --checkpoint with --config and --out\n");
      return 2;
    }
    return report(cmf_run_analyze_checkpoint(checkpoint.c_str(), config.c_str(), out.c_str(), threads));
  }
  if (*sample) {
    std::vector<int> keep;
    if (!dims.empty()) {
      try {
        for (const auto& tok : CLI::detail::split(dims, ',')) keep.push_back(std::stoi(tok));
      } catch (const std::exception&) {
        std::fprintf(stderr, "sample: --dims must be comma-separated integers\n");
        return 2;
      }
    }
    return report(cmf_run_sample(checkpoint.c_str(), n, dims.empty() ? nullptr : keep.data(), keep.size(), seed,
                                 out.c_str()));
  }
  if (*exp) return report(cmf_run_export(run_dir.c_str(), out.c_str()));
  return 2;
}
