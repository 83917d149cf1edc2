#ifndef METASR_H
#define METASR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MetasrStatus {
  METASR_STATUS_OK = 0,
  METASR_STATUS_INVALID_ARGUMENT = 1,
  METASR_STATUS_CONFIG = 2,
  METASR_STATUS_IO = 3,
  METASR_STATUS_CHECKPOINT = 4,
  METASR_STATUS_SHAPE = 5,
  METASR_STATUS_NULL_POINTER = 6,
  METASR_STATUS_PANIC = 7,
} MetasrStatus;

/**
 * An RGB image with values in [0, 1].
 */
typedef struct MetasrImage MetasrImage;

/**
 * A loaded model. Safe to share between threads for concurrent upscaling.
 */
typedef struct MetasrModel MetasrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or null. The pointer
 * stays valid until the next call on this thread.
 */
const char *metasr_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *metasr_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MetasrStatus metasr_model_load(const char *path, struct MetasrModel **out);

/**
 * # Safety
 * `model` must come from [`metasr_model_load`] and not be used afterwards.
 */
void metasr_model_free(struct MetasrModel *model);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MetasrStatus metasr_image_load(const char *path, struct MetasrImage **out);

/**
 * Copies `height * width * 3` interleaved 8-bit RGB values into a new image.
 *
 * # Safety
 * `rgb` must point to that many readable bytes.
 */
enum MetasrStatus metasr_image_from_rgb8(const uint8_t *rgb,
                                         size_t width,
                                         size_t height,
                                         struct MetasrImage **out);

/**
 * # Safety
 * `img` must be a live image handle or null.
 */
size_t metasr_image_width(const struct MetasrImage *img);

/**
 * # Safety
 * `img` must be a live image handle or null.
 */
size_t metasr_image_height(const struct MetasrImage *img);

/**
 * Writes interleaved 8-bit RGB into `buf`, which must hold at least
 * `height * width * 3` bytes.
 *
 * # Safety
 * `buf` must point to `len` writable bytes.
 */
enum MetasrStatus metasr_image_copy_rgb8(const struct MetasrImage *img, uint8_t *buf, size_t len);

/**
 * # Safety
 * `img` must be a live image handle and `path` a NUL-terminated string.
 */
enum MetasrStatus metasr_image_save_png(const struct MetasrImage *img, const char *path);

/**
 * # Safety
 * `img` must come from this library and not be used afterwards.
 */
void metasr_image_free(struct MetasrImage *img);

/**
 * `floor(len * scale)`, the side length produced by every resize here.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum MetasrStatus metasr_output_len(size_t len, double scale, size_t *out);

/**
 * Upscales `img` by `scale` into a new image.
 *
 * # Safety
 * `model` and `img` must be live handles and `out` a writable pointer.
 */
enum MetasrStatus metasr_upscale(const struct MetasrModel *model,
                                 const struct MetasrImage *img,
                                 double scale,
                                 struct MetasrImage **out);

/**
 * MATLAB-style bicubic resize by `scale` into a new image.
 *
 * # Safety
 * `img` must be a live handle and `out` a writable pointer.
 */
enum MetasrStatus metasr_bicubic(const struct MetasrImage *img,
                                 double scale,
                                 struct MetasrImage **out);

/**
 * Y-channel PSNR and SSIM of `sr` against `hr`, shaving `ceil(scale)`
 * pixels. Either output pointer may be null.
 *
 * # Safety
 * `sr` and `hr` must be live handles.
 */
enum MetasrStatus metasr_quality(const struct MetasrImage *sr,
                                 const struct MetasrImage *hr,
                                 double scale,
                                 double *psnr,
                                 double *ssim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METASR_H */
