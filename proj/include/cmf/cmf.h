#ifndef CMF_H
#define CMF_H

/* C interface to the injective flow library.
 *
 * Every function returns a cmf_status. On failure, cmf_last_error() returns
 * a message for the calling thread; it stays valid until the next failing
 * call on that thread. Arrays are row-major doubles. */

#include <stddef.h>
#include <stdint.h>

#if defined(__GNUC__)
#define CMF_API __attribute__((visibility("default")))
#else
#define CMF_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cmf_status {
  CMF_OK = 0,
  CMF_ERR_INVALID_ARGUMENT = 1,
  CMF_ERR_CONFIG = 2,
  CMF_ERR_NOT_POSITIVE_DEFINITE = 3,
  CMF_ERR_BREAKDOWN = 4,
  CMF_ERR_NON_FINITE = 5,
  CMF_ERR_MOMENT_DEGENERACY = 6,
  CMF_ERR_PARSE = 7,
  CMF_ERR_ZERO_VARIANCE = 8,
  CMF_ERR_IO = 9,
  CMF_ERR_DIMENSION_MISMATCH = 10,
  CMF_ERR_INTERNAL = 99
} cmf_status;

typedef struct cmf_model cmf_model;

CMF_API const char* cmf_version(void);
CMF_API const char* cmf_last_error(void);
CMF_API const char* cmf_status_name(cmf_status status);

/* Process exit code for a status: 0 ok, 2 configuration or argument,
 * 3 numerical failure, 4 input/output. */
CMF_API int cmf_exit_code(cmf_status status);

/* ---- models ------------------------------------------------------------ */

typedef struct cmf_model_spec {
  int latent_dim;
  int data_dim;
  int h_couplings;
  int f_couplings;
  int hidden_width; /* every conditioner hidden layer */
  int hidden_depth;
  double scale_clamp;
  uint64_t seed;
} cmf_model_spec;

CMF_API void cmf_model_spec_init(cmf_model_spec* spec);

/* Identity-initialized model. */
CMF_API cmf_status cmf_model_create(const cmf_model_spec* spec, cmf_model** out);
CMF_API cmf_status cmf_model_load(const char* path, cmf_model** out);
CMF_API cmf_status cmf_model_save(const cmf_model* model, const char* path);
CMF_API void cmf_model_free(cmf_model* model);

CMF_API cmf_status cmf_model_dims(const cmf_model* model, int* latent_dim, int* data_dim);
CMF_API cmf_status cmf_model_param_count(const cmf_model* model, size_t* count);
CMF_API cmf_status cmf_model_get_params(const cmf_model* model, double* params, size_t count);
CMF_API cmf_status cmf_model_set_params(cmf_model* model, const double* params, size_t count);

/* z: n x d, x: n x D. */
CMF_API cmf_status cmf_model_embed(const cmf_model* model, const double* z, size_t n, double* x);
CMF_API cmf_status cmf_model_project(const cmf_model* model, const double* x, size_t n, double* z);
/* log p(x) at the projection of each row, exact log-det. */
CMF_API cmf_status cmf_model_log_prob(const cmf_model* model, const double* x, size_t n, double* logp);
/* d x d metric tensor G = J^T J at a latent point. */
CMF_API cmf_status cmf_model_metric(const cmf_model* model, const double* z, double* g);
/* Mean absolute cosine similarity of the Jacobian columns over n latent points. */
CMF_API cmf_status cmf_model_macs(const cmf_model* model, const double* z, size_t n, double* macs);

/* ---- runs -------------------------------------------------------------- */

typedef struct cmf_overrides {
  int has_seed;
  uint64_t seed;
  int has_gamma;
  double gamma;
  int has_beta;
  double beta;
  int threads;       /* 0 keeps the configured value */
  int deterministic; /* forces one worker */
  const char* out_dir; /* NULL keeps the configured value */
} cmf_overrides;

CMF_API void cmf_overrides_init(cmf_overrides* o);

typedef void (*cmf_log_fn)(const char* line, void* user);

/* Parses and validates a config. Failures list every problem. */
CMF_API cmf_status cmf_config_check(const char* config_path);

/* Resolved output directory of a config after overrides. */
CMF_API cmf_status cmf_config_out_dir(const char* config_path, const cmf_overrides* o, char* buf, size_t len);

CMF_API cmf_status cmf_run_train(const char* config_path, const cmf_overrides* o, cmf_log_fn log, void* user);
CMF_API cmf_status cmf_run_eval(const char* run_dir, int threads);
CMF_API cmf_status cmf_run_analyze(const char* run_dir, const char* out_dir, int threads);
CMF_API cmf_status cmf_run_analyze_checkpoint(const char* checkpoint, const char* config_path, const char* out_dir,
                                              int threads);
/* dims may be NULL for all latents. */
CMF_API cmf_status cmf_run_sample(const char* checkpoint, int n, const int* dims, size_t ndims, uint64_t seed,
                                  const char* out_csv);
CMF_API cmf_status cmf_run_export(const char* run_dir, const char* out_dir);

#ifdef __cplusplus
}
#endif

#endif /* CMF_H */
