#ifndef SEGCODEC_H
#define SEGCODEC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum SegcodecStatus {
  SEGCODEC_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  SEGCODEC_STATUS_NULL_ARGUMENT = 1,
  /**
   * Arguments are inconsistent, e.g. an external-map container decoded without labels.
   */
  SEGCODEC_STATUS_USAGE = 2,
  /**
   * Malformed weights, images or region maps.
   */
  SEGCODEC_STATUS_DATA = 3,
  SEGCODEC_STATUS_NUMERIC = 4,
  /**
   * Corrupt or truncated container.
   */
  SEGCODEC_STATUS_DECODE = 5,
  /**
   * Container and model do not belong together.
   */
  SEGCODEC_STATUS_CONSISTENCY = 6,
  SEGCODEC_STATUS_IO = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  SEGCODEC_STATUS_INTERNAL = 8,
} SegcodecStatus;

/**
 * Loaded weights and the network they describe.
 */
typedef struct SegcodecModel SegcodecModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Load SPW1 weights from a file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SegcodecStatus segcodec_model_load(const char *path, struct SegcodecModel **out);

/**
 * Load SPW1 weights from memory.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` be a valid pointer.
 */
enum SegcodecStatus segcodec_model_from_bytes(const uint8_t *data,
                                              size_t len,
                                              struct SegcodecModel **out);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void segcodec_model_free(struct SegcodecModel *model);

/**
 * 64-bit fingerprint stored in every container made with this model, or 0 for null.
 *
 * # Safety
 * `model` must be null or a live model.
 */
uint64_t segcodec_model_hash(const struct SegcodecModel *model);

/**
 * Compress interleaved 8-bit RGB. With `labels` null the image is
 * partitioned into a `grid` x `grid` grid; otherwise `labels` holds one
 * region id per pixel and the decoder must be given the same labels.
 *
 * # Safety
 * `rgb` must hold `3 * width * height` bytes, `labels` (if not null)
 * `width * height` values, and the out pointers must be valid.
 */
enum SegcodecStatus segcodec_encode_rgb8(const struct SegcodecModel *model,
                                         const uint8_t *rgb,
                                         uint32_t width,
                                         uint32_t height,
                                         uint32_t grid,
                                         const uint32_t *labels,
                                         uint8_t **out,
                                         size_t *out_len);

/**
 * Read the image size from a container without decoding it.
 *
 * # Safety
 * `data` must point to `len` bytes; the out pointers must be valid.
 */
enum SegcodecStatus segcodec_container_info(const uint8_t *data,
                                            size_t len,
                                            uint32_t *width,
                                            uint32_t *height);

/**
 * Decode to interleaved 8-bit RGB (`3 * width * height` bytes). `labels`
 * is required for containers made with external labels and ignored
 * otherwise; it must cover the container's width x height.
 *
 * # Safety
 * `data` must point to `len` bytes; `labels` must be null or hold one
 * value per pixel; the out pointers must be valid.
 */
enum SegcodecStatus segcodec_decode_rgb8(const struct SegcodecModel *model,
                                         const uint8_t *data,
                                         size_t len,
                                         const uint32_t *labels,
                                         uint8_t **out,
                                         size_t *out_len,
                                         uint32_t *width,
                                         uint32_t *height);

/**
 * Release a buffer returned by this library. Null is ignored.
 *
 * # Safety
 * `buf` and `len` must be exactly as returned.
 */
void segcodec_buffer_free(uint8_t *buf, size_t len);

/**
 * Message for the last failure on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *segcodec_last_error(void);

/**
 * Static name of a status code.
 */
const char *segcodec_status_name(enum SegcodecStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEGCODEC_H */
