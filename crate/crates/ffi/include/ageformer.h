#ifndef AGEFORMER_H
#define AGEFORMER_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of age classes; the length of every per-class array.
 */
#define AG_NUM_CLASSES 4

/**
 * Built-in model sizes.
 */
typedef enum AgPreset {
  AG_PRESET_DESK = 0,
  AG_PRESET_PAPER = 1,
} AgPreset;

/**
 * Result of every call.
 */
typedef enum AgStatus {
  AG_STATUS_OK = 0,
  AG_STATUS_NULL_POINTER = 1,
  AG_STATUS_INVALID_ARGUMENT = 2,
  AG_STATUS_IO = 3,
  AG_STATUS_DATA = 4,
  AG_STATUS_MODEL = 5,
  AG_STATUS_NUMERIC = 6,
  AG_STATUS_PANIC = 7,
} AgStatus;

/**
 * Opaque model handle.
 */
typedef struct AgModel AgModel;

/**
 * Input geometry a model expects.
 */
typedef struct AgClipShape {
  size_t frames;
  size_t height;
  size_t width;
  size_t face_size;
} AgClipShape;

/**
 * Class prediction for one clip.
 */
typedef struct AgPrediction {
  /**
   * 0 baby/toddler, 1 adolescent, 2 adult, 3 elderly.
   */
  uint32_t class_index;
  double probs[AG_NUM_CLASSES];
  double logits[AG_NUM_CLASSES];
} AgPrediction;

/**
 * Summary scores of a prediction set.
 */
typedef struct AgMetrics {
  double accuracy;
  double macro_precision;
  double macro_recall;
  double macro_f1;
  /**
   * Row = true class, column = predicted class.
   */
  uint64_t confusion[AG_NUM_CLASSES][AG_NUM_CLASSES];
} AgMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Description of the last failure on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *ag_last_error(void);

/**
 * Creates a freshly initialized model.
 */
enum AgStatus ag_model_new(enum AgPreset preset, uint64_t seed, struct AgModel **out);

/**
 * Loads a model checkpoint written by the command-line tool or `ag_model_save`.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a writable pointer.
 */
enum AgStatus ag_model_load(const char *path, struct AgModel **out);

/**
 * # Safety
 * `model` must come from this library and `path` be nul-terminated.
 */
enum AgStatus ag_model_save(const struct AgModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void ag_model_free(struct AgModel *model);

/**
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum AgStatus ag_model_clip_shape(const struct AgModel *model, struct AgClipShape *out);

/**
 * Classifies one clip.
 *
 * `frames` holds `n_frames * height * width * 3` values matching
 * `ag_model_clip_shape`. `face` holds `face_size * face_size * 3` values of an
 * aligned crop, or is null when no face was found.
 *
 * # Safety
 * Buffers must be at least the stated sizes; `out` must be writable.
 */
enum AgStatus ag_model_predict(const struct AgModel *model,
                               const float *frames,
                               size_t n_frames,
                               size_t height,
                               size_t width,
                               const float *face,
                               size_t face_size,
                               struct AgPrediction *out);

/**
 * Zeroes the additive terms of the face path, so that an absent face leaves
 * predictions identical to the video stream alone. Writes the number of
 * tensors touched to `zeroed` when it is non-null.
 *
 * # Safety
 * `model` must come from this library.
 */
enum AgStatus ag_model_zero_support_biases(struct AgModel *model, size_t *zeroed);

/**
 * Scores `n` predictions against labels; both arrays hold class indices 0-3.
 *
 * # Safety
 * `preds` and `labels` must hold `n` values; `out` must be writable.
 */
enum AgStatus ag_metrics(const uint32_t *preds,
                         const uint32_t *labels,
                         size_t n,
                         struct AgMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AGEFORMER_H */
