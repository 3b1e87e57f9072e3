#ifndef BCNN_H
#define BCNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum BcnnStatus {
  BCNN_STATUS_OK = 0,
  BCNN_STATUS_NULL_POINTER = 1,
  BCNN_STATUS_INVALID_ARGUMENT = 2,
  BCNN_STATUS_IO = 3,
  BCNN_STATUS_FORMAT = 4,
  BCNN_STATUS_SHAPE_MISMATCH = 5,
  BCNN_STATUS_BUFFER_TOO_SMALL = 6,
  BCNN_STATUS_DIVERGENCE = 7,
  BCNN_STATUS_INTERNAL = 8,
} BcnnStatus;

/**
 * A loaded, validated network.
 */
typedef struct BcnnModel BcnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a `BCNN` model file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum BcnnStatus bcnn_model_load(const char *path, struct BcnnModel **out);

/**
 * Decodes a model from `len` bytes in the `BCNN` format.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` be a valid pointer.
 */
enum BcnnStatus bcnn_model_from_bytes(const uint8_t *data, size_t len, struct BcnnModel **out);

/**
 * Builds the reference architecture (96×96 input, two 32-channel 5×5
 * convolutions with pooling, 100-unit binary FC, 4-class head) with
 * random weights. `input_mode` uses the model-file codes 0..=3.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum BcnnStatus bcnn_model_reference(uint32_t input_mode, uint64_t seed, struct BcnnModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void bcnn_model_free(struct BcnnModel *model);

/**
 * Expected input image height, width and channel count.
 *
 * # Safety
 * All pointers must be valid.
 */
enum BcnnStatus bcnn_model_input_shape(const struct BcnnModel *model,
                                       size_t *height,
                                       size_t *width,
                                       size_t *channels);

/**
 * Number of head outputs; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t bcnn_model_num_classes(const struct BcnnModel *model);

/**
 * Model-file code of the input mode, or `u32::MAX` for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t bcnn_model_input_mode(const struct BcnnModel *model);

/**
 * Writes the `BCNN` encoding into `buf`. `*len` receives the encoded size
 * even when `capacity` is too small, so a first call with `buf = NULL`
 * and `capacity = 0` queries the size.
 *
 * # Safety
 * `buf` must have `capacity` writable bytes (or be null with capacity 0);
 * `len` must be valid.
 */
enum BcnnStatus bcnn_model_serialize(const struct BcnnModel *model,
                                     uint8_t *buf,
                                     size_t capacity,
                                     size_t *len);

/**
 * Classifies an interleaved (HWC) image of bytes. `scores` (may be null)
 * receives the head outputs, `class` (may be null) the argmax.
 *
 * # Safety
 * `pixels` must hold `len` bytes, `scores` must have `scores_len` slots.
 */
enum BcnnStatus bcnn_forward_u8(const struct BcnnModel *model,
                                const uint8_t *pixels,
                                size_t len,
                                float *scores,
                                size_t scores_len,
                                size_t *class_);

/**
 * Like [`bcnn_forward_u8`] with float pixels in `[0, 255]`.
 *
 * # Safety
 * `pixels` must hold `len` floats, `scores` must have `scores_len` slots.
 */
enum BcnnStatus bcnn_forward_f32(const struct BcnnModel *model,
                                 const float *pixels,
                                 size_t len,
                                 float *scores,
                                 size_t scores_len,
                                 size_t *class_);

/**
 * Checks the packed engine against the reference evaluation on `samples`
 * seeded random images. `*divergent` receives the number of samples with
 * any mismatch; the status is `Divergence` when it is nonzero.
 *
 * # Safety
 * `divergent` must be null or valid.
 */
enum BcnnStatus bcnn_validate(const struct BcnnModel *model,
                              size_t samples,
                              uint64_t seed,
                              size_t *divergent);

/**
 * ±1 dot product of two packed words with `valid` meaningful bits
 * (`1..=32`, MSB-first).
 *
 * # Safety
 * `out` must be valid.
 */
enum BcnnStatus bcnn_xnor_dot(uint32_t a, uint32_t b, uint32_t valid, int32_t *out);

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next call on the same thread.
 */
const char *bcnn_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bcnn_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BCNN_H */
