#pragma once

// Run configuration and the run-directory commands behind the C API:
// train, eval, analyze, sample and export.
//
// A run directory holds
//   config.yaml      resolved configuration (overrides applied)
//   metrics.jsonl    one JSON object per epoch
//   checkpoints/     best.ckpt (best validation objective)
//   report.json      test-split evaluation
//   metadata.json    timestamps, RNG and build facts

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cmf/datasets.hpp"
#include "cmf/evalkit.hpp"
#include "cmf/training.hpp"

namespace cmf::run {

struct ModelConfig {
  int latent_dim = 2;
  int data_dim = 2;
  flownet::FlowSpec h;
  flownet::FlowSpec f;
};

struct EvalConfig {
  std::vector<int> sweep_sizes;  // empty selects the default sizes
  int sample_count = 0;          // generated samples for scores; 0 = test rows
  int diagnostic_rows = 512;     // test rows used for MACS and the profile
};

struct RunConfig {
  std::string name;
  std::uint64_t seed = 0;
  datasets::DatasetSpec dataset;  // seed derived from `seed`
  ModelConfig model;
  training::TrainConfig train;    // train.seed = seed
  EvalConfig eval;
  int log_every = 0;  // epochs between progress lines, 0 = none
  bool deterministic = false;
  std::string out_dir = "runs/default";
};

/// Every violation, one message each.
std::vector<std::string> validate(const RunConfig& cfg);

/// Parses YAML text. Unknown keys, type errors and validation failures are
/// collected and thrown together as one Config error, one per line.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);
std::string to_yaml(const RunConfig& cfg);

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> gamma;
  std::optional<double> beta;
  std::optional<int> threads;
  bool deterministic = false;
  std::optional<std::string> out_dir;
};

/// Applies overrides and revalidates.
RunConfig apply(RunConfig cfg, const Overrides& o);

injective::InjectiveFlow build_model(const RunConfig& cfg);

using LogFn = std::function<void(const std::string&)>;

struct TrainSummary {
  training::TrainResult result;
  evalkit::EvalReport report;
};

/// Trains into cfg.out_dir and evaluates. A diverged run still writes its
/// partial metrics and throws NonFinite afterwards.
TrainSummary train_run(const RunConfig& cfg, const LogFn& log = {});

/// Test-split report for a model under cfg. Deterministic in cfg.seed.
evalkit::EvalReport evaluate_model(const injective::InjectiveFlow& gf, const RunConfig& cfg,
                                   const datasets::Splits& splits);

/// Recomputes report.json from a run directory's snapshot and checkpoint.
evalkit::EvalReport eval_run(const std::string& run_dir, int threads = 0);

/// Diagnostics and CSV dumps into out_dir:
///   analysis.json            macs, diag_profile, abs_cosine, sweep
///   data.csv                 test rows with logp
///   samples.csv              unrestricted samples with logp
///   restricted_k<k>.csv      samples over the k most prominent latents
void analyze(const injective::InjectiveFlow& gf, const RunConfig& cfg, const std::string& out_dir);
void analyze_run(const std::string& run_dir, const std::string& out_dir, int threads = 0);

/// n samples with the latents outside `dims` zeroed (nullopt = all latents),
/// written with header x0..xD-1,logp.
void sample_to_csv(const injective::InjectiveFlow& gf, int n, const std::optional<std::vector<int>>& dims,
                   std::uint64_t seed, const std::string& path);

/// Training curves as curves.csv and the model as model.json.
void export_run(const std::string& run_dir, const std::string& out_dir);

/// JSON object with every LossBreakdown field.
std::string breakdown_json(const training::LossBreakdown& b);
std::string epoch_json(const training::EpochRecord& r);

std::string run_checkpoint_path(const std::string& run_dir);

}  // namespace cmf::run
