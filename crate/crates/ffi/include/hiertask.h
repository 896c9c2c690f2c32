#ifndef HIERTASK_H
#define HIERTASK_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HtStatus {
  HT_STATUS_OK = 0,
  HT_STATUS_NULL_POINTER = 1,
  HT_STATUS_INVALID_UTF8 = 2,
  HT_STATUS_INVALID_ARGUMENT = 3,
  HT_STATUS_NOT_FOUND = 4,
  /**
   * The call completed but the task did not; the JSON result is still set.
   */
  HT_STATUS_TASK_FAILED = 5,
  HT_STATUS_INTERNAL = 6,
} HtStatus;

/**
 * A configured deployment that can run tasks end to end in-process.
 */
typedef struct HtEngine HtEngine;

/**
 * Skill registry handle.
 */
typedef struct HtRegistry HtRegistry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null. Owned by the
 * library and valid until the next call on the same thread.
 */
const char *ht_last_error_message(void);

/**
 * Releases a string returned through an `out_json` parameter.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void ht_string_free(char *s);

/**
 * Library version, a static string.
 */
const char *ht_version(void);

/**
 * Cosine similarity of the embeddings of two plain descriptions.
 *
 * # Safety
 * `a` and `b` must be valid C strings; `out_score` must be writable.
 */
enum HtStatus ht_text_similarity(const char *a, const char *b, double *out_score);

/**
 * The bundled skill registry.
 */
struct HtRegistry *ht_registry_bundled(void);

/**
 * Parses a registry from its JSON form.
 *
 * # Safety
 * `json` must be a valid C string; `out` must be writable.
 */
enum HtStatus ht_registry_from_json(const char *json, struct HtRegistry **out);

/**
 * Number of skills, or 0 for a null handle.
 *
 * # Safety
 * `registry` must be null or a live handle.
 */
size_t ht_registry_len(const struct HtRegistry *registry);

/**
 * # Safety
 * `registry` must be null or a handle not yet freed.
 */
void ht_registry_free(struct HtRegistry *registry);

/**
 * Aligns newline-separated subtask texts against the skills of
 * `robot_class` ("quadruped" or "drone") and writes the alignment report
 * as JSON: `{"skills": [...], "report": {...}}`.
 *
 * # Safety
 * Pointers must be valid; `out_json` must be writable.
 */
enum HtStatus ht_registry_align(const struct HtRegistry *registry,
                                const char *robot_class,
                                const char *subtasks,
                                double threshold,
                                char **out_json);

/**
 * Creates an engine from a TOML config file, or from defaults when
 * `config_path` is null.
 *
 * # Safety
 * `config_path` must be null or a valid C string; `out` must be writable.
 */
enum HtStatus ht_engine_new(const char *config_path, struct HtEngine **out);

/**
 * # Safety
 * `engine` must be null or a handle not yet freed.
 */
void ht_engine_free(struct HtEngine *engine);

/**
 * Runs a bundled scenario with all tiers in-process. Writes
 * `{"reply", "trace", "world"}` JSON even when the task fails.
 *
 * # Safety
 * Pointers must be valid; `out_json` must be writable.
 */
enum HtStatus ht_engine_run_scenario(const struct HtEngine *engine,
                                     const char *name,
                                     char **out_json);

/**
 * Runs a free-text task in the bundled field world.
 *
 * # Safety
 * Pointers must be valid; `out_json` must be writable.
 */
enum HtStatus ht_engine_run_task(const struct HtEngine *engine,
                                 const char *task_id,
                                 const char *description,
                                 char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HIERTASK_H */
