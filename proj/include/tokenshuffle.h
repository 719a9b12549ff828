/* C interface to the token-shuffle library: opaque handles, integer status
 * codes, messages through caller-provided buffers. Everything the CLI does
 * goes through this surface. */
#ifndef TOKENSHUFFLE_H
#define TOKENSHUFFLE_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define TS_API __declspec(dllexport)
#else
#define TS_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes double as CLI exit codes. */
enum {
  TS_OK = 0,
  TS_ERR_RUNTIME = 1, /* I/O, contract violations, numerical aborts */
  TS_ERR_CONFIG = 2   /* bad key, unparsable value, failed validation */
};

typedef struct ts_config ts_config;   /* run configuration (key = value set) */
typedef struct ts_session ts_session; /* loaded checkpoint ready for sampling */

typedef void (*ts_log_fn)(const char* line, void* user);

TS_API const char* ts_version(void);
/* Progress lines from training/sweeps; pass fn = NULL to silence. */
TS_API void ts_set_logger(ts_log_fn fn, void* user);

/* -- configuration ---------------------------------------------------------- */
TS_API ts_config* ts_config_create(void);
TS_API void ts_config_destroy(ts_config* cfg);
TS_API int ts_config_load_file(ts_config* cfg, const char* path, char* err, size_t err_len);
TS_API int ts_config_set(ts_config* cfg, const char* key, const char* value, char* err,
                         size_t err_len);
TS_API int ts_config_get(const ts_config* cfg, const char* key, char* out, size_t out_len, char* err,
                         size_t err_len);
TS_API int ts_config_validate(const ts_config* cfg, char* err, size_t err_len);
/* Enumerate known keys: returns NULL once index runs past the end. */
TS_API const char* ts_config_key(size_t index);

/* -- operations -------------------------------------------------------------- */
/* Renders a synthetic dataset to `path` (or to the config's dataset path when
 * path is NULL). */
TS_API int ts_gen_data(const ts_config* cfg, const char* path, char* err, size_t err_len);

/* Runs (or resumes) training in the config's out_dir. final_loss may be NULL. */
TS_API int ts_train(const ts_config* cfg, double* final_loss, char* err, size_t err_len);

/* Staged low-to-high-resolution training; stages run in order, each
 * initialized from the previous stage's checkpoint. */
TS_API int ts_staged_train(const ts_config* const* stages, size_t n_stages, char* err,
                           size_t err_len);

TS_API int ts_sweep_window(const ts_config* cfg, const int* s_values, size_t n, char* err,
                           size_t err_len);
TS_API int ts_sweep_variant(const ts_config* cfg, const char* const* variants, size_t n, char* err,
                            size_t err_len);
TS_API int ts_probe_redundancy(const ts_config* cfg, const int* r_values, size_t n, char* err,
                               size_t err_len);

/* Closed-form FLOP table for the configured model (plus s=1 baseline and the
 * paper-scale row), written as CSV. */
TS_API int ts_flops_table(const ts_config* cfg, const char* csv_path, char* err, size_t err_len);

/* Runs the structural invariant suite; returns TS_OK when every check passes. */
TS_API int ts_selftest(const char* scratch_dir, char* err, size_t err_len);

/* -- sampling ----------------------------------------------------------------- */
TS_API ts_session* ts_session_open(const char* checkpoint_path, char* err, size_t err_len);
TS_API void ts_session_close(ts_session* s);
TS_API int ts_session_grid(const ts_session* s, int* h, int* w);

/* Generates one grid for `caption` ("red square top-left"). schedule_kind is
 * constant | linear | half_linear. grid_out_path gets a one-record dataset
 * file; pgm_out_path and trace_csv_path are optional (NULL skips them). */
TS_API int ts_session_generate(ts_session* s, const char* caption, const char* schedule_kind,
                               double alpha, double temperature, int top_k, uint64_t seed,
                               const char* grid_out_path, const char* pgm_out_path,
                               const char* trace_csv_path, char* err, size_t err_len);

/* Accuracy table over (schedule kind, alpha) pairs on the held-out captions. */
TS_API int ts_sweep_cfg(ts_session* s, const char* const* kinds, size_t n_kinds, const double* alphas,
                        size_t n_alphas, int n_samples, uint64_t seed, const char* csv_path, char* err,
                        size_t err_len);

#ifdef __cplusplus
}
#endif

#endif /* TOKENSHUFFLE_H */
