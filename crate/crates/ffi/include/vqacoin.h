#ifndef VQACOIN_H
#define VQACOIN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum VqaStatus {
  VQA_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  VQA_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  VQA_STATUS_INVALID_UTF8 = 2,
  /**
   * Invalid configuration or a checkpoint built for other dimensions.
   */
  VQA_STATUS_CONFIG = 3,
  /**
   * Unreadable, corrupt or inconsistent input data.
   */
  VQA_STATUS_DATA = 4,
  /**
   * A computation produced a non-finite value.
   */
  VQA_STATUS_NUMERIC = 5,
  /**
   * A Rust panic was caught; the library state is unchanged.
   */
  VQA_STATUS_INTERNAL = 6,
} VqaStatus;

/**
 * A loaded model. Opaque to C.
 */
typedef struct VqaModel VqaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library on the same thread; do not free.
 */
const char *vqa_last_error(void);

/**
 * Loads a checkpoint file. On success `*out` owns a new model.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum VqaStatus vqa_model_load(const char *path, struct VqaModel **out);

/**
 * Releases a model from [`vqa_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from [`vqa_model_load`] and not be used afterwards.
 */
void vqa_model_free(struct VqaModel *model);

/**
 * Number of candidate answers, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live model.
 */
size_t vqa_model_answer_count(const struct VqaModel *model);

/**
 * Width of one image-feature row the model expects, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live model.
 */
size_t vqa_model_feature_dim(const struct VqaModel *model);

/**
 * Answers `question` about an image given as `rows × cols` row-major
 * features and `si_len` semantic-information words. On success `*out_answer`
 * holds a string to release with [`vqa_string_free`].
 *
 * # Safety
 * `features` must point to `rows * cols` doubles, `si_words` to `si_len`
 * NUL-terminated strings (may be null when `si_len` is 0), and
 * `out_answer` must be writable.
 */
enum VqaStatus vqa_model_predict(const struct VqaModel *model,
                                 const double *features,
                                 size_t rows,
                                 size_t cols,
                                 const char *question,
                                 const char *const *si_words,
                                 size_t si_len,
                                 char **out_answer);

/**
 * Soft accuracy of `predicted` against exactly ten annotator answers,
 * `min(matches / 3, 1)` after normalization. `exact` non-zero averages over
 * the ten leave-one-out subsets instead.
 *
 * # Safety
 * `predicted` must be a NUL-terminated string, `annotators` point to
 * `n_annotators` such strings, and `out` be writable.
 */
enum VqaStatus vqa_soft_accuracy(const char *predicted,
                                 const char *const *annotators,
                                 size_t n_annotators,
                                 int32_t exact,
                                 double *out);

/**
 * Semantic-information words for one image's captions, as a JSON array
 * string in `*out_json` (release with [`vqa_string_free`]).
 *
 * # Safety
 * `captions` must point to `n_captions` NUL-terminated strings (may be null
 * when `n_captions` is 0) and `out_json` be writable.
 */
enum VqaStatus vqa_semantic_info(const char *const *captions, size_t n_captions, char **out_json);

/**
 * Releases a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void vqa_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VQACOIN_H */
