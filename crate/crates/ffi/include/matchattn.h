#ifndef MATCHATTN_H
#define MATCHATTN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MaStatus {
  MA_STATUS_OK = 0,
  MA_STATUS_NULL_POINTER = 1,
  MA_STATUS_INVALID_ARGUMENT = 2,
  MA_STATUS_SHAPE_MISMATCH = 3,
  MA_STATUS_NON_FINITE = 4,
  MA_STATUS_IO = 5,
  MA_STATUS_FORMAT = 6,
  MA_STATUS_BUFFER_TOO_SMALL = 7,
  MA_STATUS_PANIC = 8,
} MaStatus;

/**
 * Decoder weights and configuration loaded from a checkpoint.
 */
typedef struct MaModel MaModel;

/**
 * Dense row-major array of doubles.
 */
typedef struct MaTensor MaTensor;

typedef struct MaFlops {
  uint64_t qk_flops;
  uint64_t bsm_flops;
  uint64_t agg_flops;
  uint64_t tensor_flops;
  uint64_t attn_memory;
} MaFlops;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread. Valid until the next
 * call into this library from the same thread.
 */
const char *ma_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ma_version(void);

/**
 * Copies `data` (product of `shape` values) into a new tensor.
 *
 * # Safety
 * `shape` must point to `rank` extents and `data` to as many doubles as
 * their product; `out` must be writable.
 */
enum MaStatus ma_tensor_new(const size_t *shape,
                            size_t rank,
                            const double *data,
                            struct MaTensor **out);

/**
 * # Safety
 * `t` must come from this library and not be used afterwards.
 */
void ma_tensor_free(struct MaTensor *t);

/**
 * Number of axes, or 0 for a null handle.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
size_t ma_tensor_rank(const struct MaTensor *t);

/**
 * Number of elements, or 0 for a null handle.
 *
 * # Safety
 * `t` must be null or a live tensor handle.
 */
size_t ma_tensor_len(const struct MaTensor *t);

/**
 * Writes the extents into `out` (capacity `cap`).
 *
 * # Safety
 * `t` must be a live tensor handle and `out` writable for `cap` values.
 */
enum MaStatus ma_tensor_shape(const struct MaTensor *t, size_t *out, size_t cap);

/**
 * Writes the values into `out` (capacity `cap`).
 *
 * # Safety
 * `t` must be a live tensor handle and `out` writable for `cap` values.
 */
enum MaStatus ma_tensor_data(const struct MaTensor *t, double *out, size_t cap);

/**
 * Closed-form cost of one MatchAttention layer over an `h x w` map.
 *
 * # Safety
 * `out` must be writable.
 */
enum MaStatus ma_flops_count(uint64_t h,
                             uint64_t w,
                             uint64_t heads,
                             uint64_t ck,
                             uint64_t cv,
                             uint64_t window,
                             struct MaFlops *out);

/**
 * Attention weights over the `(window+1)^2` expanded window for
 * similarities `sim` and fractional offset `(fx, fy)` in `[0, 1)`.
 *
 * # Safety
 * `sim` and `out` must each hold `(window+1)^2` doubles.
 */
enum MaStatus ma_bilinear_softmax(const double *sim,
                                  size_t window,
                                  double fx,
                                  double fy,
                                  double *out);

/**
 * Loads a checkpoint written by `matchattn train-toy`.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` writable.
 */
enum MaStatus ma_model_load(const char *path, struct MaModel **out);

/**
 * # Safety
 * `m` must come from `ma_model_load` and not be used afterwards.
 */
void ma_model_free(struct MaModel *m);

/**
 * Predicts the reference-view relative positions `[H, W, 2]` from two
 * `[H, W, 3]` images with values in `[0, 1]`.
 *
 * # Safety
 * All handles must be live; `out` must be writable.
 */
enum MaStatus ma_model_infer(const struct MaModel *m,
                             const struct MaTensor *left,
                             const struct MaTensor *right,
                             struct MaTensor **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MATCHATTN_H */
