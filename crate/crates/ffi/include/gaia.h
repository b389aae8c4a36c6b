#ifndef GAIA_H
#define GAIA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GaiaStatus {
  GAIA_STATUS_OK = 0,
  GAIA_STATUS_NULL_POINTER = 1,
  GAIA_STATUS_INVALID_ARGUMENT = 2,
  GAIA_STATUS_SHAPE = 3,
  GAIA_STATUS_DEGENERATE = 4,
  GAIA_STATUS_NON_FINITE = 5,
  GAIA_STATUS_CONFIG = 6,
  GAIA_STATUS_FORMAT = 7,
  GAIA_STATUS_IO = 8,
  GAIA_STATUS_PANIC = 9,
} GaiaStatus;

/**
 * A 2-D brightness-temperature grid with its missing mask.
 */
typedef struct GaiaField GaiaField;

/**
 * Pretrained encoder/decoder weights.
 */
typedef struct GaiaModel GaiaModel;

/**
 * Confusion counts and derived scores; undefined ratios are NaN.
 */
typedef struct GaiaBinaryReport {
  uint64_t tp;
  uint64_t fp;
  uint64_t tn;
  uint64_t fn_;
  double accuracy;
  double far;
  double precision;
  double recall;
  double f1;
} GaiaBinaryReport;

typedef struct GaiaBBox {
  double y0;
  double x0;
  double y1;
  double x1;
} GaiaBBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *gaia_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gaia_version(void);

/**
 * Builds a field from `h*w` row-major values. `missing` may be NULL (fully
 * observed); otherwise non-zero bytes mark missing pixels.
 *
 * # Safety
 * `values` must hold `h*w` doubles and `missing`, if not NULL, `h*w` bytes.
 */
enum GaiaStatus gaia_field_new(const double *values,
                               const uint8_t *missing,
                               size_t height,
                               size_t width,
                               int64_t timestamp,
                               struct GaiaField **out_field);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out_field` a valid pointer.
 */
enum GaiaStatus gaia_field_load(const char *path_, struct GaiaField **out_field);

/**
 * # Safety
 * `field` must be a live handle and `path` a NUL-terminated string.
 */
enum GaiaStatus gaia_field_save(const struct GaiaField *field, const char *path_);

/**
 * Releases a field; NULL is ignored.
 *
 * # Safety
 * `field` must be NULL or a handle not yet freed.
 */
void gaia_field_free(struct GaiaField *field);

/**
 * # Safety
 * `field` must be a live handle; `height`, `width` valid pointers.
 */
enum GaiaStatus gaia_field_dims(const struct GaiaField *field, size_t *height, size_t *width);

/**
 * # Safety
 * `field` must be a live handle; `timestamp` a valid pointer.
 */
enum GaiaStatus gaia_field_timestamp(const struct GaiaField *field, int64_t *timestamp);

/**
 * Copies row-major values into `buffer`, which must hold exactly `len = h*w` doubles.
 *
 * # Safety
 * `buffer` must be writable for `len` doubles.
 */
enum GaiaStatus gaia_field_copy_values(const struct GaiaField *field, double *buffer, size_t len);

/**
 * Copies the missing mask (1 = missing) into `buffer` of exactly `len = h*w` bytes.
 *
 * # Safety
 * `buffer` must be writable for `len` bytes.
 */
enum GaiaStatus gaia_field_copy_missing(const struct GaiaField *field, uint8_t *buffer, size_t len);

/**
 * Maps Kelvin to [0, 1] over `[t_min, t_max]`.
 *
 * # Safety
 * `field` must be a live handle; `out_field` a valid pointer.
 */
enum GaiaStatus gaia_normalize(const struct GaiaField *field,
                               double t_min,
                               double t_max,
                               struct GaiaField **out_field);

/**
 * Fills missing pixels from observed neighbours within `radius`.
 *
 * # Safety
 * `field` must be a live handle; `out_field` a valid pointer.
 */
enum GaiaStatus gaia_local_gap_fill(const struct GaiaField *field,
                                    size_t radius,
                                    struct GaiaField **out_field);

/**
 * Block-mean downscaling by integer factors.
 *
 * # Safety
 * `field` must be a live handle; `out_field` a valid pointer.
 */
enum GaiaStatus gaia_downscale(const struct GaiaField *field,
                               size_t out_height,
                               size_t out_width,
                               struct GaiaField **out_field);

/**
 * Mean structural similarity over the full image.
 *
 * # Safety
 * `a`, `b` must be live handles; `result` a valid pointer.
 */
enum GaiaStatus gaia_ssim(const struct GaiaField *a, const struct GaiaField *b, double *result);

/**
 * RMSE over pixels where `region` is non-zero (`len = h*w` bytes).
 *
 * # Safety
 * `region` must be readable for `len` bytes.
 */
enum GaiaStatus gaia_rmse_masked(const struct GaiaField *truth,
                                 const struct GaiaField *pred,
                                 const uint8_t *region,
                                 size_t len,
                                 double *result);

/**
 * Pixelwise scores of `pred >= threshold` against `truth > 0.5`.
 *
 * # Safety
 * Handles must be live; `report` a valid pointer.
 */
enum GaiaStatus gaia_binary_metrics(const struct GaiaField *pred,
                                    const struct GaiaField *truth,
                                    double threshold,
                                    struct GaiaBinaryReport *report);

/**
 * Intersection over union of two boxes.
 *
 * # Safety
 * All pointers must be valid.
 */
enum GaiaStatus gaia_iou(const struct GaiaBBox *a, const struct GaiaBBox *b, double *result);

/**
 * Loss-mixing weight for `epoch`.
 *
 * # Safety
 * `result` must be a valid pointer.
 */
enum GaiaStatus gaia_lambda_schedule(uint32_t epoch,
                                     uint32_t warmup_epochs,
                                     uint32_t transition_epochs,
                                     double lambda_star,
                                     double *result);

/**
 * Cosine learning rate with linear warm-up.
 *
 * # Safety
 * `result` must be a valid pointer.
 */
enum GaiaStatus gaia_cosine_lr(uint64_t step,
                               uint64_t total_steps,
                               double base_lr,
                               uint64_t warmup_steps,
                               double *result);

/**
 * Hides exactly `round(ratio*n_patches)` patches chosen by `seed`; writes
 * 1 for hidden into `hidden` (`n_patches` bytes).
 *
 * # Safety
 * `hidden` must be writable for `n_patches` bytes.
 */
enum GaiaStatus gaia_sample_mask(size_t n_patches, double ratio, uint64_t seed, uint8_t *hidden);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out_model` a valid pointer.
 */
enum GaiaStatus gaia_model_load(const char *path_, struct GaiaModel **out_model);

/**
 * Releases a model; NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void gaia_model_free(struct GaiaModel *model);

/**
 * Square patch edge in pixels.
 *
 * # Safety
 * `model` must be a live handle; `patch` a valid pointer.
 */
enum GaiaStatus gaia_model_patch_size(const struct GaiaModel *model, size_t *patch);

/**
 * Reconstructs hidden and missing patches. `hidden` holds one byte per
 * patch in row-major patch order (`n_patches` entries) or is NULL for no
 * extra masking. The composite keeps every observed visible pixel.
 *
 * # Safety
 * Handles must be live; `hidden`, if not NULL, readable for `n_patches` bytes.
 */
enum GaiaStatus gaia_model_gapfill(const struct GaiaModel *model,
                                   const struct GaiaField *field,
                                   const uint8_t *hidden,
                                   size_t n_patches,
                                   struct GaiaField **out_field);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GAIA_H */
