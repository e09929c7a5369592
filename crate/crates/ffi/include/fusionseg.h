#ifndef FUSIONSEG_H
#define FUSIONSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum FsStatus {
  FS_STATUS_OK = 0,
  FS_STATUS_NULL_POINTER = 1,
  FS_STATUS_INVALID_ARGUMENT = 2,
  FS_STATUS_SHAPE = 3,
  FS_STATUS_IO = 4,
  FS_STATUS_CHECKPOINT = 5,
  FS_STATUS_NON_FINITE = 6,
  FS_STATUS_PANIC = 7,
  FS_STATUS_OTHER = 8,
} FsStatus;

/**
 * A restored checkpoint: the fusion network and, if present, the segmenter.
 */
typedef struct FsModel FsModel;

/**
 * Fusion quality of one fused image against its two sources.
 */
typedef struct FsFusionMetrics {
  double en;
  double sd;
  double sf;
  double mi;
  double scd;
  double vif;
  double qabf;
  double ssim;
} FsFusionMetrics;

/**
 * Lesion-class segmentation quality; `hd95` is infinite when either mask
 * has no lesion.
 */
typedef struct FsSegMetrics {
  double dice;
  double miou;
  double hd95;
} FsSegMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fs_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated and
 * always NUL-terminated when `len > 0`). Returns the buffer size needed to
 * hold the whole message, including the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t fs_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint file and writes a new handle to `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` a writable pointer.
 */
enum FsStatus fs_model_load(const char *path, struct FsModel **out);

/**
 * Loads a checkpoint from an in-memory byte buffer.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` be writable.
 */
enum FsStatus fs_model_load_bytes(const uint8_t *data, size_t len, struct FsModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void fs_model_free(struct FsModel *model);

/**
 * Whether the checkpoint carried a segmentation network.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
bool fs_model_has_segmenter(const struct FsModel *model);

/**
 * Fuses two registered images of `height * width` pixels into `out`.
 *
 * # Safety
 * `m1`, `m2` and `out` must each hold `height * width` doubles.
 */
enum FsStatus fs_fuse(const struct FsModel *model,
                      size_t height,
                      size_t width,
                      const double *m1,
                      const double *m2,
                      double *out);

/**
 * Fuses two images and writes per-pixel labels (0 background, 1 tissue,
 * 2 lesion) to `out`.
 *
 * # Safety
 * `m1` and `m2` must hold `height * width` doubles, `out` as many bytes.
 */
enum FsStatus fs_segment(const struct FsModel *model,
                         size_t height,
                         size_t width,
                         const double *m1,
                         const double *m2,
                         uint8_t *out);

/**
 * Segments an already fused image.
 *
 * # Safety
 * `fused` must hold `height * width` doubles, `out` as many bytes.
 */
enum FsStatus fs_segment_fused(const struct FsModel *model,
                               size_t height,
                               size_t width,
                               const double *fused,
                               uint8_t *out);

/**
 * Reference-free and source-referenced fusion metrics.
 *
 * # Safety
 * The three images must hold `height * width` doubles; `out` must be writable.
 */
enum FsStatus fs_fusion_metrics(size_t height,
                                size_t width,
                                const double *fused,
                                const double *m1,
                                const double *m2,
                                struct FsFusionMetrics *out);

/**
 * Dice, mIoU and HD95 of a predicted mask against the reference.
 *
 * # Safety
 * Both masks must hold `height * width` bytes; `out` must be writable.
 */
enum FsStatus fs_seg_metrics(size_t height,
                             size_t width,
                             const uint8_t *pred,
                             const uint8_t *reference,
                             struct FsSegMetrics *out);

/**
 * Runs the hypergradient self-check on a seeded toy problem. Writes whether
 * it passed and the relative error of the implicit gradient against the
 * closed form; either output pointer may be null.
 *
 * # Safety
 * Non-null output pointers must be writable.
 */
enum FsStatus fs_verify_hypergrad(uint64_t seed, double damping, bool *pass, double *rel_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FUSIONSEG_H */
