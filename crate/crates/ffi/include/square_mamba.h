#ifndef SQUARE_MAMBA_H
#define SQUARE_MAMBA_H

/* Generated by cbindgen from the square-mamba-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Flattened window length expected by [`sqm_model_predict`].
 */
#define SQM_WINDOW_LEN 105

/**
 * Augmented window length (105 channels x 3 x 3 neighborhood), row-major.
 */
#define SQM_AUGMENTED_LEN 945

/**
 * Result of every FFI call.
 */
typedef enum SqmStatus {
  /**
   * Success.
   */
  SqmOk = 0,
  /**
   * A pointer or length argument was invalid.
   */
  SqmInvalidArgument = 1,
  /**
   * The input (file, schema, value range) was rejected.
   */
  SqmInputError = 2,
  /**
   * An internal or I/O failure.
   */
  SqmRuntimeError = 3,
} SqmStatus;

/**
 * Opaque handle around a loaded parameter set.
 */
typedef struct SqmModel SqmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version string of the library; static storage, do not free.
 */
const char *sqm_version(void);

/**
 * Copy the calling thread's most recent error message into `buf`
 * (NUL-terminated, truncated to `buf_len`). Returns the full message
 * length, excluding the terminator.
 *
 * # Safety
 * `buf` must point to `buf_len` writable bytes, or be NULL (then only the
 * length is returned).
 */
size_t sqm_last_error_message(char *buf, size_t buf_len);

/**
 * Load a trained checkpoint from `path` into a new handle stored in `out`.
 * On failure `*out` is NULL and the error message is retrievable.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SqmStatus sqm_model_load(const char *path, struct SqmModel **out);

/**
 * Release a handle returned by [`sqm_model_load`]. NULL is a no-op.
 *
 * # Safety
 * `model` must be a pointer returned by [`sqm_model_load`] that has not
 * been freed yet.
 */
void sqm_model_free(struct SqmModel *model);

/**
 * Number of trainable parameters in the loaded model.
 *
 * # Safety
 * `model` must be a live handle from [`sqm_model_load`].
 */
size_t sqm_model_param_count(const struct SqmModel *model);

/**
 * Predict the next-month drought condition for one standardized window.
 * `z` is the flattened 15x7 history (length 105, month-major), `tz` the
 * 105x3x3 spatial augmentation (row-major, center column equal to `z`).
 * The forecast lands in `out_d`, strictly inside (-3, 3).
 *
 * The handle is not thread-safe: callers must serialize access per handle.
 *
 * # Safety
 * `model` must be a live handle; `z` and `tz` must point to `z_len` and
 * `tz_len` readable doubles; `out_d` must be writable.
 */
enum SqmStatus sqm_model_predict(struct SqmModel *model,
                                 const double *z,
                                 size_t z_len,
                                 const double *tz,
                                 size_t tz_len,
                                 double *out_d);

/**
 * Map a drought index in [-3, 3] to its category label, copied into `buf`
 * as a NUL-terminated string.
 *
 * # Safety
 * `buf` must point to `buf_len` writable bytes.
 */
enum SqmStatus sqm_categorize(double d, char *buf, size_t buf_len);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SQUARE_MAMBA_H */
