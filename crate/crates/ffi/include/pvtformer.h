#ifndef PVTFORMER_H
#define PVTFORMER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum PvtStatus {
  PVT_STATUS_OK = 0,
  PVT_STATUS_NULL_POINTER = 1,
  PVT_STATUS_INVALID_ARGUMENT = 2,
  PVT_STATUS_IO = 3,
  PVT_STATUS_FORMAT = 4,
  PVT_STATUS_CHECKPOINT = 5,
  PVT_STATUS_NON_FINITE = 6,
  PVT_STATUS_PANIC = 7,
  PVT_STATUS_INTERNAL = 8,
} PvtStatus;

/**
 * Opaque model handle.
 */
typedef struct PvtModel PvtModel;

/**
 * Per-slice metrics. `hd` is meaningful only when `hd_defined` is 1.
 */
typedef struct PvtSliceMetrics {
  double dice;
  double miou;
  double recall;
  double precision;
  double f2;
  double hd;
  int32_t hd_defined;
} PvtSliceMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *pvt_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *pvt_version(void);

/**
 * Builds a freshly initialised model from a preset name (`default` or
 * `tiny`).
 *
 * # Safety
 * `preset` must be a nul-terminated string and `out` a valid pointer.
 */
enum PvtStatus pvt_model_new(const char *preset, uint64_t seed, struct PvtModel **out);

/**
 * Loads a model from a checkpoint file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum PvtStatus pvt_model_load(const char *path, struct PvtModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from `pvt_model_new` or `pvt_model_load` and not be
 * used afterwards.
 */
void pvt_model_free(struct PvtModel *model);

/**
 * Side length of the square input the model runs at.
 *
 * # Safety
 * Both pointers must be valid.
 */
enum PvtStatus pvt_model_input_size(const struct PvtModel *model, size_t *out);

/**
 * Number of trainable scalars.
 *
 * # Safety
 * Both pointers must be valid.
 */
enum PvtStatus pvt_model_param_count(const struct PvtModel *model, uint64_t *out);

/**
 * Segments one windowed grayscale slice of `side * side` values in [0, 1].
 * The slice is resized to the model input when sizes differ and the
 * outputs are mapped back to `side * side`. `probs` may be null; `mask`
 * receives 0 or 1 per pixel.
 *
 * # Safety
 * `image` must hold `side * side` floats, `mask` (and `probs` when not
 * null) must have room for as many elements.
 */
enum PvtStatus pvt_model_predict(const struct PvtModel *model,
                                 const float *image,
                                 size_t side,
                                 float threshold,
                                 float *probs,
                                 uint8_t *mask);

/**
 * Closed-form parameter and MAC counts of a preset at a square input.
 *
 * # Safety
 * `preset` must be nul-terminated; `params` and `macs` must be valid.
 */
enum PvtStatus pvt_count(const char *preset, size_t input, uint64_t *params, uint64_t *macs);

/**
 * Metrics of one binary prediction against its ground truth, both
 * row-major `h * w` arrays of 0 or 1. `two_class_iou` selects the mean of
 * foreground and background IoU instead of foreground IoU.
 *
 * # Safety
 * `pred` and `gt` must hold `h * w` bytes; `out` must be valid.
 */
enum PvtStatus pvt_slice_metrics(const uint8_t *pred,
                                 const uint8_t *gt,
                                 size_t h,
                                 size_t w,
                                 int32_t two_class_iou,
                                 struct PvtSliceMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PVTFORMER_H */
