#ifndef HRSS_H
#define HRSS_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HrssStatus {
  HRSS_STATUS_OK = 0,
  HRSS_STATUS_NULL_POINTER = 1,
  HRSS_STATUS_INVALID_ARGUMENT = 2,
  HRSS_STATUS_SHAPE = 3,
  HRSS_STATUS_CONFIG = 4,
  HRSS_STATUS_IO = 5,
  HRSS_STATUS_FORMAT = 6,
  HRSS_STATUS_NUMERIC = 7,
  HRSS_STATUS_PANIC = 8,
} HrssStatus;

typedef enum HrssDiscretization {
  HRSS_DISCRETIZATION_FIRST_ORDER = 0,
  HRSS_DISCRETIZATION_EXACT_ZOH = 1,
} HrssDiscretization;

/**
 * Multi-branch classification network.
 */
typedef struct HrssModel HrssModel;

/**
 * Dense f64 tensor, row-major.
 */
typedef struct HrssTensor HrssTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library from the same thread.
 */
const char *hrss_last_error(void);

/**
 * Copies `data` (product of `shape` entries) into a new tensor.
 *
 * # Safety
 * `shape` must point to `rank` values and `data` to as many values as
 * their product; `out` must be writable.
 */
enum HrssStatus hrss_tensor_new(const size_t *shape,
                                size_t rank,
                                const double *data,
                                struct HrssTensor **out);

/**
 * # Safety
 * `t` must come from this library and not be freed twice.
 */
void hrss_tensor_free(struct HrssTensor *t);

/**
 * Rank of `t`, 0 when null.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
size_t hrss_tensor_rank(const struct HrssTensor *t);

/**
 * Element count of `t`, 0 when null.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
size_t hrss_tensor_numel(const struct HrssTensor *t);

/**
 * Copies the extents into `shape`, which holds `cap` entries.
 *
 * # Safety
 * `shape` must be writable for `cap` values.
 */
enum HrssStatus hrss_tensor_shape(const struct HrssTensor *t, size_t *shape, size_t cap);

/**
 * Borrowed pointer to the elements; valid while `t` lives.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
const double *hrss_tensor_data(const struct HrssTensor *t);

/**
 * Writes the binary tensor container.
 *
 * # Safety
 * `t` must be a live handle and `path` a nul-terminated string.
 */
enum HrssStatus hrss_tensor_save(const struct HrssTensor *t, const char *path);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum HrssStatus hrss_tensor_load(const char *path, struct HrssTensor **out);

/**
 * Selective scan of `x` (B, L, C) given Δ (B, L, C), A (C, N) and the
 * input-dependent B, C (B, L, N). `chunk = 0` runs the sequential
 * recurrence; otherwise the chunked scan with that chunk length.
 *
 * # Safety
 * All handles must be live and `out` writable.
 */
enum HrssStatus hrss_scan(const struct HrssTensor *delta,
                          const struct HrssTensor *a,
                          const struct HrssTensor *b,
                          const struct HrssTensor *c,
                          const struct HrssTensor *x,
                          enum HrssDiscretization disc,
                          size_t chunk,
                          struct HrssTensor **out);

/**
 * Contribution of token `m` to token `n` (1-based, `m < n`) in one
 * channel of the first batch element.
 *
 * # Safety
 * All handles must be live and `out` writable.
 */
enum HrssStatus hrss_contribution(const struct HrssTensor *delta,
                                  const struct HrssTensor *a,
                                  const struct HrssTensor *b,
                                  const struct HrssTensor *c,
                                  enum HrssDiscretization disc,
                                  size_t m,
                                  size_t n,
                                  size_t channel,
                                  double *out);

/**
 * Builds a model from a JSON configuration file, or from the named preset
 * ("S" or "B") when `config_path` is null.
 *
 * # Safety
 * Strings must be nul-terminated or null; `out` writable.
 */
enum HrssStatus hrss_model_new(const char *preset,
                               const char *config_path,
                               uint64_t seed,
                               struct HrssModel **out);

/**
 * # Safety
 * `m` must come from this library and not be freed twice.
 */
void hrss_model_free(struct HrssModel *m);

/**
 * Trainable parameters of the built model, 0 when null.
 *
 * # Safety
 * `m` must be null or a live model handle.
 */
uint64_t hrss_model_num_params(const struct HrssModel *m);

/**
 * Analytic parameter count and per-image multiply-accumulates at `h`×`w`
 * for the configuration, without building the model.
 *
 * # Safety
 * Strings must be nul-terminated or null; outputs writable or null.
 */
enum HrssStatus hrss_count(const char *preset,
                           const char *config_path,
                           size_t h,
                           size_t w,
                           uint64_t *params,
                           uint64_t *flops);

/**
 * Classifies a (N, 3, H, W) batch; writes (N, classes) logits.
 *
 * # Safety
 * Handles must be live and `logits` writable.
 */
enum HrssStatus hrss_model_forward(const struct HrssModel *m,
                                   const struct HrssTensor *x,
                                   struct HrssTensor **logits);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HRSS_H */
