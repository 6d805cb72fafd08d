#ifndef ESINDY_H
#define ESINDY_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum EsindyStatus {
  ESINDY_STATUS_OK = 0,
  ESINDY_STATUS_NULL_ARGUMENT = 1,
  ESINDY_STATUS_INVALID_UTF8 = 2,
  ESINDY_STATUS_IO = 3,
  ESINDY_STATUS_PARSE = 4,
  ESINDY_STATUS_SCHEMA = 5,
  ESINDY_STATUS_CONFIG = 6,
  ESINDY_STATUS_DIMENSION = 7,
  ESINDY_STATUS_INSUFFICIENT_DATA = 8,
  ESINDY_STATUS_NUMERICAL = 9,
  ESINDY_STATUS_UNDEFINED_R2 = 10,
  ESINDY_STATUS_NO_MODEL = 11,
  ESINDY_STATUS_UNKNOWN_PLANT = 12,
  ESINDY_STATUS_UNSUPPORTED_DEGREE = 13,
  ESINDY_STATUS_PANIC = 14,
} EsindyStatus;

/**
 * Opaque identified model.
 */
typedef struct EsindyModel EsindyModel;

/**
 * Shape of a model.
 */
typedef struct EsindyDims {
  size_t states;
  size_t controls;
  size_t exogenous;
  /**
   * Number of past samples beyond the newest one the model reads.
   */
  size_t state_delays;
  size_t features;
  size_t nonzero_terms;
} EsindyDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *esindy_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *esindy_version(void);

/**
 * Loads a model file from `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EsindyStatus esindy_model_load(const char *path, struct EsindyModel **out);

/**
 * Parses a model from the JSON text of a model file.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EsindyStatus esindy_model_from_json(const char *json, struct EsindyModel **out);

/**
 * Writes the model file to `path`.
 *
 * # Safety
 * `model` must come from this library and `path` must be NUL-terminated.
 */
enum EsindyStatus esindy_model_save(const struct EsindyModel *model, const char *path);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and must not be used afterwards.
 */
void esindy_model_free(struct EsindyModel *model);

/**
 * # Safety
 * `model` must come from this library and `out` must be valid.
 */
enum EsindyStatus esindy_model_dims(const struct EsindyModel *model, struct EsindyDims *out);

/**
 * Closed-loop simulation.
 *
 * `window` holds the `state_delays + 1` most recent measured states, oldest
 * first (`(state_delays + 1) * states` values). `controls` and `exogenous`
 * hold `horizon` samples each; step `k` uses sample `k` and predicts the
 * state one sample later into row `k` of `predicted` (`horizon * states`
 * values). `steps_done` receives the number of rows written; a rollout that
 * leaves the divergence bound stops early and the remaining rows are NaN.
 *
 * # Safety
 * All pointers must reference buffers of the stated lengths. Input buffers
 * of length zero may be null.
 */
enum EsindyStatus esindy_model_simulate(const struct EsindyModel *model,
                                        const double *window,
                                        const double *controls,
                                        const double *exogenous,
                                        size_t horizon,
                                        double *predicted,
                                        size_t *steps_done);

/**
 * Coefficient of determination of `prediction` against `truth`.
 *
 * # Safety
 * `truth` and `prediction` must hold `len` values; `out` must be valid.
 */
enum EsindyStatus esindy_r_squared(const double *truth,
                                   const double *prediction,
                                   size_t len,
                                   double *out);

/**
 * Runs identification as configured by the TOML file at `config_path`
 * and returns the selected model. Nothing is written to disk.
 *
 * # Safety
 * `config_path` must be NUL-terminated and `out` a valid pointer.
 */
enum EsindyStatus esindy_identify(const char *config_path, struct EsindyModel **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ESINDY_H */
