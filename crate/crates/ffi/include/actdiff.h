#ifndef ACTDIFF_H
#define ACTDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum ActdiffStatus {
  ACTDIFF_STATUS_OK = 0,
  ACTDIFF_STATUS_NULL_POINTER = 1,
  ACTDIFF_STATUS_INVALID_ARGUMENT = 2,
  ACTDIFF_STATUS_SHAPE = 3,
  ACTDIFF_STATUS_NON_FINITE = 4,
  ACTDIFF_STATUS_FORMAT = 5,
  ACTDIFF_STATUS_CHECKSUM = 6,
  ACTDIFF_STATUS_IO = 7,
  ACTDIFF_STATUS_PANIC = 8,
  ACTDIFF_STATUS_INTERNAL = 9,
} ActdiffStatus;

/**
 * Trained model with its configuration and noise schedule.
 */
typedef struct ActdiffModel ActdiffModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *actdiff_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *actdiff_version(void);

/**
 * Loads a checkpoint written by the training command.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum ActdiffStatus actdiff_model_load(const char *path, struct ActdiffModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`actdiff_model_load`] and not be used afterwards.
 */
void actdiff_model_free(struct ActdiffModel *model);

/**
 * Feature dimension the model expects, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t actdiff_model_feature_dim(const struct ActdiffModel *model);

/**
 * Number of action classes, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t actdiff_model_num_classes(const struct ActdiffModel *model);

/**
 * Segments a whole video.
 *
 * `features` holds `frames * dim` row-major values; `out_labels` receives
 * `frames` labels. Equal seeds give equal output.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum ActdiffStatus actdiff_segment(const struct ActdiffModel *model,
                                   const float *features,
                                   size_t frames,
                                   size_t dim,
                                   uint64_t seed,
                                   uint32_t *out_labels);

/**
 * Labels the observed frames and anticipates `horizon` further frames.
 *
 * `features` holds only the `observed` frames; `out_labels` receives
 * `observed + horizon` labels.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum ActdiffStatus actdiff_anticipate(const struct ActdiffModel *model,
                                      const float *features,
                                      size_t observed,
                                      size_t dim,
                                      size_t horizon,
                                      uint64_t seed,
                                      uint32_t *out_labels);

/**
 * Percentage of frames where `pred` equals `gt`.
 *
 * # Safety
 * `pred` and `gt` must hold `n` labels; `out` must be valid.
 */
enum ActdiffStatus actdiff_frame_accuracy(const uint32_t *pred,
                                          const uint32_t *gt,
                                          size_t n,
                                          double *out);

/**
 * Segmental edit score in `[0, 100]`.
 *
 * # Safety
 * `pred` and `gt` must hold `n` labels; `out` must be valid.
 */
enum ActdiffStatus actdiff_edit_score(const uint32_t *pred,
                                      const uint32_t *gt,
                                      size_t n,
                                      double *out);

/**
 * Segmental F1 at IoU threshold `k` percent.
 *
 * # Safety
 * `pred` and `gt` must hold `n` labels; `out` must be valid.
 */
enum ActdiffStatus actdiff_f1_at_k(const uint32_t *pred,
                                   const uint32_t *gt,
                                   size_t n,
                                   double k,
                                   double *out);

/**
 * Mean over classes of `future` against `gt[observed..observed + len]`.
 *
 * `future` holds `future_len` labels and is padded with its last label or
 * cropped to `len`; `gt` holds `gt_len` labels.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `out` must be valid.
 */
enum ActdiffStatus actdiff_moc(const uint32_t *future,
                               size_t future_len,
                               const uint32_t *gt,
                               size_t gt_len,
                               size_t observed,
                               size_t len,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACTDIFF_H */
