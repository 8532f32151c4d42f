#ifndef PRICESENTRY_H
#define PRICESENTRY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PsStatus {
  PS_STATUS_OK = 0,
  PS_STATUS_NULL_POINTER = 1,
  PS_STATUS_INVALID_UTF8 = 2,
  PS_STATUS_INVALID_INPUT = 3,
  PS_STATUS_NOT_FOUND = 4,
  PS_STATUS_IO = 5,
  PS_STATUS_BUNDLE_ERROR = 6,
  PS_STATUS_PANIC = 7,
  PS_STATUS_INTERNAL = 8,
} PsStatus;

/**
 * Opaque handle to a loaded model bundle.
 */
typedef struct PsBundle PsBundle;

/**
 * The numeric part of a score response.
 */
typedef struct PsScore {
  bool is_anomaly;
  bool blocked;
  uint8_t priority_tier;
  double score;
  double business_impact;
} PsScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a bundle file (`bundle.bin`).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PsStatus ps_bundle_load(const char *path, struct PsBundle **out);

/**
 * Loads the latest bundle published under a bundle directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PsStatus ps_bundle_load_latest(const char *dir, struct PsBundle **out);

/**
 * # Safety
 * `bundle` must come from a load function and not be freed twice. Null
 * is ignored.
 */
void ps_bundle_free(struct PsBundle *bundle);

/**
 * The bundle's version string, owned by the handle.
 *
 * # Safety
 * `bundle` must be a live handle. The result is valid until it is freed.
 */
const char *ps_bundle_version(const struct PsBundle *bundle);

/**
 * Scores a JSON item record and writes the JSON score response to `out`,
 * to be released with [`ps_string_free`].
 *
 * # Safety
 * `bundle` must be a live handle, `record_json` NUL-terminated and `out`
 * a valid pointer.
 */
enum PsStatus ps_score_json(const struct PsBundle *bundle, const char *record_json, char **out);

/**
 * Like [`ps_score_json`] but fills a plain struct, for callers that only
 * need the decision.
 *
 * # Safety
 * `bundle` must be a live handle, `record_json` NUL-terminated and `out`
 * a valid pointer.
 */
enum PsStatus ps_score_fields(const struct PsBundle *bundle,
                              const char *record_json,
                              struct PsScore *out);

/**
 * # Safety
 * `s` must come from this library. Null is ignored.
 */
void ps_string_free(char *s);

/**
 * The message of the last failed call on this thread, or null. Valid
 * until the next call into the library on the same thread.
 */
const char *ps_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRICESENTRY_H */
