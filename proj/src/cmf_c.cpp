#include "cmf/cmf.h"

#include <cstring>
#include <memory>
#include <new>
#include <string>

#include "cmf/checkpoint.hpp"
#include "cmf/error.hpp"
#include "cmf/evalkit.hpp"
#include "cmf/metric.hpp"
#include "cmf/run.hpp"
#include "cmf/training.hpp"

struct cmf_model {
  cmf::injective::InjectiveFlow flow;
  std::uint64_t seed = 0;
};

namespace {

using cmf::linalg::Matrix;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

thread_local std::string g_last_error;

cmf_status fail(cmf_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

template <typename F>
cmf_status guard(F&& fn) {
  try {
    fn();
    return CMF_OK;
  } catch (const cmf::Error& e) {
    return fail(static_cast<cmf_status>(e.code()), e.what());
  } catch (const std::bad_alloc&) {
    return fail(CMF_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(CMF_ERR_INTERNAL, e.what());
  }
}

Matrix rows_in(const double* p, std::size_t n, int cols) {
  return Eigen::Map<const RowMatrix>(p, static_cast<Eigen::Index>(n), cols);
}

void rows_out(const Matrix& m, double* p) {
  Eigen::Map<RowMatrix>(p, m.rows(), m.cols()) = m;
}

void require(bool ok, const char* msg) {
  if (!ok) throw cmf::Error(cmf::ErrorCode::InvalidArgument, msg);
}

cmf::run::Overrides to_overrides(const cmf_overrides* o) {
  cmf::run::Overrides out;
  if (!o) return out;
  if (o->has_seed) out.seed = o->seed;
  if (o->has_gamma) out.gamma = o->gamma;
  if (o->has_beta) out.beta = o->beta;
  if (o->threads > 0) out.threads = o->threads;
  out.deterministic = o->deterministic != 0;
  if (o->out_dir) out.out_dir = o->out_dir;
  return out;
}

}  // namespace

extern "C" {

const char* cmf_version(void) { return "1.0.0"; }

const char* cmf_last_error(void) { return g_last_error.c_str(); }

const char* cmf_status_name(cmf_status status) {
  switch (status) {
    case CMF_OK: return "ok";
    case CMF_ERR_INTERNAL: return "internal";
    default: return cmf::to_string(static_cast<cmf::ErrorCode>(status));
  }
}

int cmf_exit_code(cmf_status status) {
  switch (status) {
    case CMF_OK:
      return 0;
    case CMF_ERR_INVALID_ARGUMENT:
    case CMF_ERR_CONFIG:
    case CMF_ERR_DIMENSION_MISMATCH:
      return 2;
    case CMF_ERR_NOT_POSITIVE_DEFINITE:
    case CMF_ERR_BREAKDOWN:
    case CMF_ERR_NON_FINITE:
    case CMF_ERR_MOMENT_DEGENERACY:
    case CMF_ERR_ZERO_VARIANCE:
      return 3;
    case CMF_ERR_PARSE:
    case CMF_ERR_IO:
      return 4;
    default:
      return 1;
  }
}

void cmf_model_spec_init(cmf_model_spec* spec) {
  if (!spec) return;
  spec->latent_dim = 2;
  spec->data_dim = 2;
  spec->h_couplings = 4;
  spec->f_couplings = 4;
  spec->hidden_width = 32;
  spec->hidden_depth = 2;
  spec->scale_clamp = 5.0;
  spec->seed = 0;
}

cmf_status cmf_model_create(const cmf_model_spec* spec, cmf_model** out) {
  return guard([&] {
    require(spec && out, "cmf_model_create: null argument");
    require(spec->latent_dim >= 1 && spec->latent_dim <= spec->data_dim, "cmf_model_create: need 1 <= d <= D");
    require(spec->h_couplings >= 0 && spec->f_couplings >= 0 && spec->hidden_width >= 1 && spec->hidden_depth >= 0,
            "cmf_model_create: bad architecture");
    cmf::injective::InjectiveSpec s;
    s.latent_dim = spec->latent_dim;
    s.data_dim = spec->data_dim;
    s.h.couplings = spec->h_couplings;
    s.f.couplings = spec->f_couplings;
    s.h.hidden.assign(spec->hidden_depth, spec->hidden_width);
    s.f.hidden = s.h.hidden;
    s.h.scale_clamp = s.f.scale_clamp = spec->scale_clamp;
    auto m = std::make_unique<cmf_model>();
    m->flow = cmf::injective::InjectiveFlow::build(s);
    m->seed = spec->seed;
    cmf::linalg::Rng rng(spec->seed);
    m->flow.init_identity(rng);
    *out = m.release();
  });
}

cmf_status cmf_model_load(const char* path, cmf_model** out) {
  return guard([&] {
    require(path && out, "cmf_model_load: null argument");
    auto ck = cmf::checkpoint::load(path);
    auto m = std::make_unique<cmf_model>();
    m->flow = std::move(ck.model);
    m->seed = ck.seed;
    *out = m.release();
  });
}

cmf_status cmf_model_save(const cmf_model* model, const char* path) {
  return guard([&] {
    require(model && path, "cmf_model_save: null argument");
    cmf::checkpoint::save(path, {model->flow, model->seed, -1});
  });
}

void cmf_model_free(cmf_model* model) { delete model; }

cmf_status cmf_model_dims(const cmf_model* model, int* latent_dim, int* data_dim) {
  return guard([&] {
    require(model && latent_dim && data_dim, "cmf_model_dims: null argument");
    *latent_dim = model->flow.latent_dim();
    *data_dim = model->flow.data_dim();
  });
}

cmf_status cmf_model_param_count(const cmf_model* model, size_t* count) {
  return guard([&] {
    require(model && count, "cmf_model_param_count: null argument");
    *count = model->flow.param_count();
  });
}

cmf_status cmf_model_get_params(const cmf_model* model, double* params, size_t count) {
  return guard([&] {
    require(model && params, "cmf_model_get_params: null argument");
    require(count == model->flow.param_count(), "cmf_model_get_params: wrong count");
    const auto p = model->flow.params();
    std::memcpy(params, p.data(), count * sizeof(double));
  });
}

cmf_status cmf_model_set_params(cmf_model* model, const double* params, size_t count) {
  return guard([&] {
    require(model && params, "cmf_model_set_params: null argument");
    require(count == model->flow.param_count(), "cmf_model_set_params: wrong count");
    model->flow.set_params({params, count});
  });
}

cmf_status cmf_model_embed(const cmf_model* model, const double* z, size_t n, double* x) {
  return guard([&] {
    require(model && z && x && n > 0, "cmf_model_embed: null argument or n = 0");
    rows_out(model->flow.embed_rows(rows_in(z, n, model->flow.latent_dim())), x);
  });
}

cmf_status cmf_model_project(const cmf_model* model, const double* x, size_t n, double* z) {
  return guard([&] {
    require(model && x && z && n > 0, "cmf_model_project: null argument or n = 0");
    rows_out(model->flow.project_rows(rows_in(x, n, model->flow.data_dim())), z);
  });
}

cmf_status cmf_model_log_prob(const cmf_model* model, const double* x, size_t n, double* logp) {
  return guard([&] {
    require(model && x && logp && n > 0, "cmf_model_log_prob: null argument or n = 0");
    const auto ll = cmf::evalkit::loglik_rows(model->flow, rows_in(x, n, model->flow.data_dim()));
    std::memcpy(logp, ll.data(), n * sizeof(double));
  });
}

cmf_status cmf_model_metric(const cmf_model* model, const double* z, double* g) {
  return guard([&] {
    require(model && z && g, "cmf_model_metric: null argument");
    const int d = model->flow.latent_dim();
    const cmf::linalg::Vector zv = Eigen::Map<const cmf::linalg::Vector>(z, d);
    const Matrix j = cmf::metric::jacobian(model->flow, zv);
    rows_out(cmf::metric::metric_tensor(j).g, g);
  });
}

cmf_status cmf_model_macs(const cmf_model* model, const double* z, size_t n, double* macs) {
  return guard([&] {
    require(model && z && macs && n > 0, "cmf_model_macs: null argument or n = 0");
    *macs = cmf::training::mean_macs(model->flow, rows_in(z, n, model->flow.latent_dim()));
  });
}

void cmf_overrides_init(cmf_overrides* o) {
  if (!o) return;
  std::memset(o, 0, sizeof(*o));
}

cmf_status cmf_config_check(const char* config_path) {
  return guard([&] {
    require(config_path, "cmf_config_check: null path");
    cmf::run::load_config(config_path);
  });
}

cmf_status cmf_config_out_dir(const char* config_path, const cmf_overrides* o, char* buf, size_t len) {
  return guard([&] {
    require(config_path && buf && len > 0, "cmf_config_out_dir: null argument");
    const auto cfg = cmf::run::apply(cmf::run::load_config(config_path), to_overrides(o));
    require(cfg.out_dir.size() < len, "cmf_config_out_dir: buffer too small");
    std::memcpy(buf, cfg.out_dir.c_str(), cfg.out_dir.size() + 1);
  });
}

cmf_status cmf_run_train(const char* config_path, const cmf_overrides* o, cmf_log_fn log, void* user) {
  return guard([&] {
    require(config_path, "cmf_run_train: null path");
    const auto cfg = cmf::run::apply(cmf::run::load_config(config_path), to_overrides(o));
    cmf::run::LogFn fn;
    if (log) fn = [&](const std::string& line) { log(line.c_str(), user); };
    cmf::run::train_run(cfg, fn);
  });
}

cmf_status cmf_run_eval(const char* run_dir, int threads) {
  return guard([&] {
    require(run_dir, "cmf_run_eval: null path");
    cmf::run::eval_run(run_dir, threads);
  });
}

cmf_status cmf_run_analyze(const char* run_dir, const char* out_dir, int threads) {
  return guard([&] {
    require(run_dir && out_dir, "cmf_run_analyze: null path");
    cmf::run::analyze_run(run_dir, out_dir, threads);
  });
}

cmf_status cmf_run_analyze_checkpoint(const char* checkpoint, const char* config_path, const char* out_dir,
                                      int threads) {
  return guard([&] {
    require(checkpoint && config_path && out_dir, "cmf_run_analyze_checkpoint: null path");
    auto cfg = cmf::run::load_config(config_path);
    if (threads > 0) cfg.train.threads = threads;
    const auto ck = cmf::checkpoint::load(checkpoint);
    cmf::run::analyze(ck.model, cfg, out_dir);
  });
}

cmf_status cmf_run_sample(const char* checkpoint, int n, const int* dims, size_t ndims, uint64_t seed,
                          const char* out_csv) {
  return guard([&] {
    require(checkpoint && out_csv, "cmf_run_sample: null path");
    require(dims || ndims == 0, "cmf_run_sample: null dims with ndims > 0");
    const auto ck = cmf::checkpoint::load(checkpoint);
    std::optional<std::vector<int>> d;
    if (dims) d = std::vector<int>(dims, dims + ndims);
    cmf::run::sample_to_csv(ck.model, n, d, seed, out_csv);
  });
}

cmf_status cmf_run_export(const char* run_dir, const char* out_dir) {
  return guard([&] {
    require(run_dir && out_dir, "cmf_run_export: null path");
    cmf::run::export_run(run_dir, out_dir);
  });
}

}  // extern "C"
