#ifndef LLMCD_H
#define LLMCD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LlmcdStatus {
  LLMCD_STATUS_OK = 0,
  LLMCD_STATUS_NULL_ARGUMENT = 1,
  LLMCD_STATUS_INVALID_UTF8 = 2,
  LLMCD_STATUS_PARSE = 3,
  LLMCD_STATUS_INVALID = 4,
  LLMCD_STATUS_INFEASIBLE = 5,
  LLMCD_STATUS_INTERNAL = 6,
} LlmcdStatus;

typedef struct LlmcdEstimate LlmcdEstimate;

typedef struct LlmcdModel LlmcdModel;

typedef struct LlmcdSystem LlmcdSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *llmcd_last_error(void);

/**
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum LlmcdStatus llmcd_model_from_json(const char *json, struct LlmcdModel **out);

/**
 * # Safety
 * `m` must come from `llmcd_model_from_json` or be null.
 */
void llmcd_model_free(struct LlmcdModel *m);

/**
 * Total parameter count, or 0 on error.
 *
 * # Safety
 * `m` must be a live model handle.
 */
uint64_t llmcd_model_total_params(const struct LlmcdModel *m);

/**
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum LlmcdStatus llmcd_system_from_json(const char *json, struct LlmcdSystem **out);

/**
 * # Safety
 * `s` must come from `llmcd_system_from_json` or be null.
 */
void llmcd_system_free(struct LlmcdSystem *s);

/**
 * Estimate one strategy (JSON). `seq` of 0 uses the model's sequence length.
 *
 * # Safety
 * Handles must be live; `strategy_json` NUL-terminated; `out` writable.
 */
enum LlmcdStatus llmcd_estimate(const struct LlmcdModel *model,
                                const struct LlmcdSystem *system,
                                const char *strategy_json,
                                uint64_t batch,
                                uint64_t seq,
                                struct LlmcdEstimate **out);

/**
 * # Safety
 * `e` must come from `llmcd_estimate` or be null.
 */
void llmcd_estimate_free(struct LlmcdEstimate *e);

/**
 * Step time in seconds; NaN on a null handle.
 *
 * # Safety
 * `e` must be a live estimate handle or null.
 */
double llmcd_estimate_step_time(const struct LlmcdEstimate *e);

/**
 * Throughput in tokens per second; NaN on a null handle.
 *
 * # Safety
 * `e` must be a live estimate handle or null.
 */
double llmcd_estimate_tokens_per_sec(const struct LlmcdEstimate *e);

/**
 * Model FLOPs utilization; NaN on a null handle.
 *
 * # Safety
 * `e` must be a live estimate handle or null.
 */
double llmcd_estimate_mfu(const struct LlmcdEstimate *e);

/**
 * Per-GPU tier-1 bytes; NaN on a null handle.
 *
 * # Safety
 * `e` must be a live estimate handle or null.
 */
double llmcd_estimate_tier1_bytes(const struct LlmcdEstimate *e);

/**
 * Full estimate as JSON; release with `llmcd_string_free`. Null on error.
 *
 * # Safety
 * `e` must be a live estimate handle.
 */
char *llmcd_estimate_to_json(const struct LlmcdEstimate *e);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void llmcd_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LLMCD_H */
