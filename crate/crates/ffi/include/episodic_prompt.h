#ifndef EPISODIC_PROMPT_H
#define EPISODIC_PROMPT_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EpStatus {
  EP_STATUS_OK = 0,
  EP_STATUS_NULL_POINTER = 1,
  EP_STATUS_INVALID_STRING = 2,
  EP_STATUS_CONFIG = 3,
  EP_STATUS_DATA = 4,
  EP_STATUS_IO = 5,
  EP_STATUS_NUMERIC = 6,
  EP_STATUS_INTERNAL = 7,
  EP_STATUS_PANIC = 8,
  /**
   * The session has no trained or loaded prompts yet.
   */
  EP_STATUS_NOT_TRAINED = 9,
} EpStatus;

typedef enum EpTask {
  EP_TASK_BASE_TO_NEW = 0,
  EP_TASK_DOMAIN_GENERALIZATION = 1,
} EpTask;

/**
 * Opaque run configuration.
 */
typedef struct EpConfig EpConfig;

/**
 * Opaque session: generated data, frozen encoders and the prompt bank.
 */
typedef struct EpSession EpSession;

/**
 * Accuracies in percent; fields that do not apply to the task are NaN.
 */
typedef struct EpMetrics {
  double base_acc;
  double new_acc;
  double harmonic_mean;
  double target_acc;
  double train_acc;
  uint64_t steps;
} EpMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or null. Valid until the next call.
 */
const char *ep_last_error(void);

/**
 * `2ab / (a + b)`, or 0 when both are 0.
 */
double ep_harmonic_mean(double a, double b);

/**
 * Default configuration for `task`.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum EpStatus ep_config_default(enum EpTask task, struct EpConfig **out);

/**
 * Parses a TOML configuration.
 *
 * # Safety
 * `toml` is a NUL-terminated string; `out` must be valid for writes.
 */
enum EpStatus ep_config_parse(const char *toml, struct EpConfig **out);

/**
 * # Safety
 * `config` is a live handle.
 */
enum EpStatus ep_config_set_seed(struct EpConfig *config, uint64_t seed);

/**
 * Run id of the resolved configuration, written as 16 hex digits plus NUL
 * into `buf` (at least 17 bytes).
 *
 * # Safety
 * `config` is a live handle; `buf` is valid for `len` bytes.
 */
enum EpStatus ep_config_run_id(const struct EpConfig *config, char *buf, size_t len);

/**
 * # Safety
 * `config` is null or a handle not yet freed.
 */
void ep_config_free(struct EpConfig *config);

/**
 * Generates data and builds the frozen encoders. The config is copied.
 *
 * # Safety
 * `config` is a live handle; `out` must be valid for writes.
 */
enum EpStatus ep_session_new(const struct EpConfig *config, struct EpSession **out);

/**
 * Trains from freshly initialized prompts, replacing any previous bank.
 *
 * # Safety
 * `session` is a live handle.
 */
enum EpStatus ep_session_train(struct EpSession *session);

/**
 * # Safety
 * `session` is a live handle; `out` must be valid for writes.
 */
enum EpStatus ep_session_evaluate(const struct EpSession *session, struct EpMetrics *out);

/**
 * Writes the prompt bank checkpoint to `path`.
 *
 * # Safety
 * `session` is a live handle; `path` is a NUL-terminated string.
 */
enum EpStatus ep_session_save(const struct EpSession *session, const char *path);

/**
 * Loads a checkpoint; its prompt shape must match the session's config.
 *
 * # Safety
 * `session` is a live handle; `path` is a NUL-terminated string.
 */
enum EpStatus ep_session_load(struct EpSession *session, const char *path);

/**
 * # Safety
 * `session` is null or a handle not yet freed.
 */
void ep_session_free(struct EpSession *session);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EPISODIC_PROMPT_H */
