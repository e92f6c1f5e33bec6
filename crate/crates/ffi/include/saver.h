#ifndef SAVER_H
#define SAVER_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SaverStatus {
  SAVER_STATUS_OK = 0,
  SAVER_STATUS_NULL_ARGUMENT = 1,
  SAVER_STATUS_INVALID_UTF8 = 2,
  SAVER_STATUS_PARSE_ERROR = 3,
  SAVER_STATUS_INVALID_ARGUMENT = 4,
  SAVER_STATUS_INTERNAL = 5,
} SaverStatus;

/**
 * Opaque task handle.
 */
typedef struct SaverTask SaverTask;

/**
 * Opaque trajectory handle.
 */
typedef struct SaverTrajectory SaverTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *saver_last_error(void);

/**
 * Parses a task from JSON into a new handle.
 *
 * # Safety
 * `json` must be null or a nul-terminated string; `out` must be null or
 * writable.
 */
enum SaverStatus saver_task_from_json(const char *json, struct SaverTask **out);

/**
 * # Safety
 * `task` must be null or a handle from [`saver_task_from_json`] not yet freed.
 */
void saver_task_free(struct SaverTask *task);

/**
 * Parses a trajectory (`{"steps": [...]}`) from JSON into a new handle.
 *
 * # Safety
 * `json` must be null or a nul-terminated string; `out` must be null or
 * writable.
 */
enum SaverStatus saver_trajectory_from_json(const char *json, struct SaverTrajectory **out);

/**
 * # Safety
 * `trajectory` must be null or a handle from
 * [`saver_trajectory_from_json`] not yet freed.
 */
void saver_trajectory_free(struct SaverTrajectory *trajectory);

/**
 * Step count, or 0 for a null handle.
 *
 * # Safety
 * `trajectory` must be null or a live handle.
 */
size_t saver_trajectory_len(const struct SaverTrajectory *trajectory);

/**
 * Rule-mode audit; writes the violation instances as a JSON array.
 * `task` may be null, in which case no evidence documents are available.
 *
 * # Safety
 * Handles must be null or live; `out_json` must be null or writable.
 */
enum SaverStatus saver_audit_json(const struct SaverTrajectory *trajectory,
                                  const struct SaverTask *task,
                                  char **out_json);

/**
 * Rule-mode audit and repair loop with up to `r_max` rounds; writes the
 * full outcome (final trajectory, residual violations, per-round trace)
 * as JSON.
 *
 * # Safety
 * Handles must be null or live; `out_json` must be null or writable.
 */
enum SaverStatus saver_repair_json(const struct SaverTrajectory *trajectory,
                                   const struct SaverTask *task,
                                   uint32_t r_max,
                                   char **out_json);

/**
 * Share of steps flagged by a rule-mode audit.
 *
 * # Safety
 * Handles must be null or live; `out` must be null or writable.
 */
enum SaverStatus saver_unfaithfulness_rate(const struct SaverTrajectory *trajectory,
                                           const struct SaverTask *task,
                                           double *out);

/**
 * Draws a size-`k` subset from the k-DPP of the row-major `m x m` kernel
 * and writes the sorted 0-based indices to `out_indices[0..k]`.
 *
 * # Safety
 * `kernel` must point to `m * m` doubles and `out_indices` to room for `k`
 * values (either may be null, which is reported).
 */
enum SaverStatus saver_kdpp_sample(const double *kernel,
                                   size_t m,
                                   size_t k,
                                   uint64_t seed,
                                   size_t *out_indices);

/**
 * Exact match and token F1 of `prediction` against `n_golds` gold answers.
 *
 * # Safety
 * `prediction` must be a nul-terminated string and `golds` must point to
 * `n_golds` of them; `em` and `f1` must be writable.
 */
enum SaverStatus saver_em_f1(const char *prediction,
                             const char *const *golds,
                             size_t n_golds,
                             uint8_t *em,
                             double *f1);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void saver_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAVER_H */
