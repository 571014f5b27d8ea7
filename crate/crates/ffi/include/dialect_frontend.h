#ifndef DIALECT_FRONTEND_H
#define DIALECT_FRONTEND_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Model kind reported by [`df_model_kind`].
 */
typedef enum DfModelKind {
  DF_MODEL_KIND_NON_AUTOREGRESSIVE = 0,
  DF_MODEL_KIND_AUTOREGRESSIVE = 1,
} DfModelKind;

/**
 * Result codes.
 */
typedef enum DfStatus {
  DF_STATUS_OK = 0,
  DF_STATUS_NULL_ARGUMENT = 1,
  DF_STATUS_INVALID_UTF8 = 2,
  DF_STATUS_IO = 3,
  DF_STATUS_CHECKPOINT = 4,
  DF_STATUS_CONFIG = 5,
  DF_STATUS_DIMENSION = 6,
  DF_STATUS_EMPTY_INPUT = 7,
  DF_STATUS_PATTERN = 8,
  DF_STATUS_PIPELINE = 9,
  DF_STATUS_NUMERICAL = 10,
  DF_STATUS_PARSE = 11,
  DF_STATUS_PANIC = 12,
} DfStatus;

/**
 * Opaque translation model handle.
 */
typedef struct DfModel DfModel;

/**
 * Opaque pattern set handle.
 */
typedef struct DfPatterns DfPatterns;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next call on the same thread.
 */
const char *df_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *df_version(void);

/**
 * Loads a checkpoint. On success `*out` receives a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DfStatus df_model_load(const char *path, struct DfModel **out);

/**
 * Writes the model to a checkpoint file.
 *
 * # Safety
 * `model` must come from [`df_model_load`]; `path` must be NUL-terminated.
 */
enum DfStatus df_model_save(const struct DfModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`df_model_load`] and not be used afterwards.
 */
void df_model_free(struct DfModel *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum DfStatus df_model_kind(const struct DfModel *model, enum DfModelKind *out);

/**
 * Compiles guard patterns, one regular expression per line.
 *
 * # Safety
 * `patterns` must be NUL-terminated and `out` a valid pointer.
 */
enum DfStatus df_patterns_new(const char *patterns, struct DfPatterns **out);

/**
 * # Safety
 * `patterns` must come from [`df_patterns_new`] and not be used afterwards.
 */
void df_patterns_free(struct DfPatterns *patterns);

/**
 * Replaces the guard patterns a model uses. The model keeps its own copy.
 *
 * # Safety
 * Both handles must be valid.
 */
enum DfStatus df_model_set_patterns(struct DfModel *model, const struct DfPatterns *patterns);

/**
 * Translates one sentence. `*out` receives a string to release with
 * [`df_string_free`].
 *
 * # Safety
 * `model` must be valid, `text` NUL-terminated and `out` a valid pointer.
 */
enum DfStatus df_translate(const struct DfModel *model, const char *text, char **out);

/**
 * Runs the default frontend pipeline and returns the tab-separated row
 * `input, translation, phonemes`. `model` may be null, in which case
 * translation is the identity.
 *
 * # Safety
 * `model` must be null or valid, `text` NUL-terminated, `out` valid.
 */
enum DfStatus df_pipeline_run(const struct DfModel *model, const char *text, char **out);

/**
 * Strict corpus character BLEU (max order 4) of `n` candidate lines
 * against `n` reference lines.
 *
 * # Safety
 * `candidates` and `references` must each point to `n` NUL-terminated
 * strings; `out` must be valid.
 */
enum DfStatus df_char_bleu(const char *const *candidates,
                           const char *const *references,
                           size_t n,
                           double *out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void df_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIALECT_FRONTEND_H */
