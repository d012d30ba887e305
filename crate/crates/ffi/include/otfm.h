#ifndef OTFM_H
#define OTFM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OtfmStatus {
  OTFM_STATUS_OK = 0,
  OTFM_STATUS_ARGUMENT = 1,
  OTFM_STATUS_FORMAT = 2,
  OTFM_STATUS_CORRUPTION = 3,
  OTFM_STATUS_CONFIG = 4,
  OTFM_STATUS_NUMERICAL = 5,
  OTFM_STATUS_IO = 6,
  OTFM_STATUS_NULL_POINTER = 7,
  OTFM_STATUS_PANIC = 8,
} OtfmStatus;

/**
 * Opaque handle to a loaded mapping network.
 */
typedef struct OtfmModel OtfmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t otfm_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *otfm_version(void);

/**
 * Load a checkpoint. `use_ema` selects the averaged weights.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum OtfmStatus otfm_model_load(const char *path, bool use_ema, struct OtfmModel **out);

/**
 * Release a handle from [`otfm_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from `otfm_model_load` and not be used afterwards.
 */
void otfm_model_free(struct OtfmModel *model);

/**
 * Band count and resolution ratio of a model.
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be writable.
 */
enum OtfmStatus otfm_model_info(const struct OtfmModel *model, size_t *bands, size_t *ratio);

/**
 * Fuse a planar PAN (`(lr_h·r) × (lr_w·r)`) with a planar LRMS
 * (`bands × lr_h × lr_w`) into `out` (`bands × lr_h·r × lr_w·r`).
 *
 * # Safety
 * Buffers must hold the element counts above; `out_len` is checked.
 */
enum OtfmStatus otfm_fuse(const struct OtfmModel *model,
                          const float *pan,
                          const float *lrms,
                          size_t bands,
                          size_t lr_h,
                          size_t lr_w,
                          size_t steps,
                          float *out,
                          size_t out_len);

/**
 * Spectral angle mapper (degrees) between two planar images.
 *
 * # Safety
 * `a` and `b` must hold `bands·h·w` values; `out` must be writable.
 */
enum OtfmStatus otfm_sam(const float *a,
                         const float *b,
                         size_t bands,
                         size_t h,
                         size_t w,
                         double *out);

/**
 * ERGAS of `fused` against `reference` at resolution ratio `ratio`.
 *
 * # Safety
 * As for [`otfm_sam`].
 */
enum OtfmStatus otfm_ergas(const float *fused,
                           const float *reference,
                           size_t bands,
                           size_t h,
                           size_t w,
                           size_t ratio,
                           double *out);

/**
 * `(1 - d_lambda)(1 - d_s)`; both inputs must lie in `[0, 1]`.
 *
 * # Safety
 * `out` must be writable.
 */
enum OtfmStatus otfm_hqnr(double d_lambda, double d_s, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OTFM_H */
