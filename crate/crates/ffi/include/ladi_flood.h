/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef LADI_FLOOD_H
#define LADI_FLOOD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LadiStatus {
  LADI_STATUS_OK = 0,
  LADI_STATUS_NULL_ARGUMENT = 1,
  LADI_STATUS_INVALID_ARGUMENT = 2,
  LADI_STATUS_IO = 3,
  LADI_STATUS_SCHEMA = 4,
  LADI_STATUS_CHECKPOINT = 5,
  LADI_STATUS_RUNTIME = 6,
  LADI_STATUS_PANIC = 7,
} LadiStatus;

/**
 * Curated index handle.
 */
typedef struct LadiIndex LadiIndex;

/**
 * Trained model handle.
 */
typedef struct LadiModel LadiModel;

typedef struct LadiConfusion {
  uint64_t tp;
  uint64_t fp;
  uint64_t tn;
  uint64_t fn_;
} LadiConfusion;

/**
 * `has_precision` / `has_recall` are false when the denominator is zero;
 * the value field is then 0 and must be ignored.
 */
typedef struct LadiMetrics {
  double accuracy;
  double precision;
  double recall;
  bool has_precision;
  bool has_recall;
} LadiMetrics;

typedef struct LadiPrediction {
  /**
   * 1 flood, 0 non-flood.
   */
  uint8_t label;
  double confidence;
} LadiPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *ladi_last_error_message(void);

/**
 * Clean the annotation table at `labels_path`, write the curated index to
 * `out_index` and return a handle to it in `*out` (may be NULL if the
 * handle is not wanted).
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be NULL or writable.
 */
enum LadiStatus ladi_prepare(const char *labels_path,
                             const char *out_index,
                             bool include_machine,
                             struct LadiIndex **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum LadiStatus ladi_index_read(const char *path, struct LadiIndex **out);

/**
 * Number of images in the index; 0 for NULL.
 *
 * # Safety
 * `index` must be NULL or a live handle.
 */
size_t ladi_index_len(const struct LadiIndex *index);

/**
 * Number of images with `label` (1 flood, 0 non-flood); 0 for NULL or an
 * invalid label.
 *
 * # Safety
 * `index` must be NULL or a live handle.
 */
size_t ladi_index_count(const struct LadiIndex *index, uint8_t label);

/**
 * # Safety
 * `index` must be NULL or a handle not yet freed.
 */
void ladi_index_free(struct LadiIndex *index);

/**
 * Count outcomes of `len` predictions against truths (values 0 or 1).
 *
 * # Safety
 * `preds` and `truths` must point to `len` readable bytes; `out` writable.
 */
enum LadiStatus ladi_confusion(const uint8_t *preds,
                               const uint8_t *truths,
                               size_t len,
                               struct LadiConfusion *out);

/**
 * # Safety
 * `cm` must be readable and `out` writable.
 */
enum LadiStatus ladi_metrics(const struct LadiConfusion *cm, struct LadiMetrics *out);

/**
 * Load a checkpoint (weights `.safetensors` or its `.json` sidecar).
 *
 * # Safety
 * `checkpoint` must be a NUL-terminated string and `out` writable.
 */
enum LadiStatus ladi_model_load(const char *checkpoint, struct LadiModel **out);

/**
 * Classify the image file at `image_path`.
 *
 * # Safety
 * `model` must be a live handle, `image_path` NUL-terminated, `out` writable.
 */
enum LadiStatus ladi_model_predict_file(const struct LadiModel *model,
                                        const char *image_path,
                                        struct LadiPrediction *out);

/**
 * Classify a packed 8-bit RGB buffer of `width * height * 3` bytes.
 *
 * # Safety
 * `rgb` must point to `width * height * 3` readable bytes.
 */
enum LadiStatus ladi_model_predict_rgb(const struct LadiModel *model,
                                       const uint8_t *rgb,
                                       uint32_t width,
                                       uint32_t height,
                                       struct LadiPrediction *out);

/**
 * Number of trainable parameters; -1 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
int64_t ladi_model_parameter_count(const struct LadiModel *model);

/**
 * Model input side length in pixels; -1 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
int64_t ladi_model_input_size(const struct LadiModel *model);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void ladi_model_free(struct LadiModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LADI_FLOOD_H */
