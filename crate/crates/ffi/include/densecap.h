#ifndef DENSECAP_H
#define DENSECAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DcStatus {
  DC_STATUS_OK = 0,
  DC_STATUS_NULL_POINTER = 1,
  DC_STATUS_INVALID_ARGUMENT = 2,
  DC_STATUS_IO = 3,
  DC_STATUS_PARSE = 4,
  DC_STATUS_VALIDATION = 5,
  DC_STATUS_NUMERIC = 6,
  DC_STATUS_BUFFER_TOO_SMALL = 7,
  DC_STATUS_INTERNAL = 8,
} DcStatus;

/**
 * A trained model with its vocabulary and inference settings.
 */
typedef struct DcModel DcModel;

/**
 * Features and annotations of one video.
 */
typedef struct DcVideo DcVideo;

typedef struct DcProposal {
  double start;
  double end;
  double score;
} DcProposal;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *dc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dc_version(void);

/**
 * Temporal IoU of `[a_start, a_end]` and `[b_start, b_end]`.
 */
double dc_tiou(double a_start, double a_end, double b_start, double b_end);

/**
 * Loads a checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DcStatus dc_model_load(const char *path, struct DcModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`dc_model_load`] and not be used afterwards.
 */
void dc_model_free(struct DcModel *model);

/**
 * Loads a feature file into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DcStatus dc_video_load(const char *path, struct DcVideo **out);

/**
 * Releases a video. Null is ignored.
 *
 * # Safety
 * `video` must come from [`dc_video_load`] and not be used afterwards.
 */
void dc_video_free(struct DcVideo *video);

/**
 * Number of frames of a video, 0 for null.
 *
 * # Safety
 * `video` must be null or a live handle.
 */
size_t dc_video_frames(const struct DcVideo *video);

/**
 * Writes the selected proposals of `video`, best first, into
 * `out[0..capacity]` and their total count into `*count`. Returns
 * `BUFFER_TOO_SMALL` when `capacity < *count`; the first `capacity` are
 * still written.
 *
 * # Safety
 * Handles must be live, `count` valid, and `out` valid for `capacity`
 * elements (it may be null when `capacity` is 0).
 */
enum DcStatus dc_propose(const struct DcModel *model,
                         const struct DcVideo *video,
                         struct DcProposal *out,
                         size_t capacity,
                         size_t *count);

/**
 * Greedy caption of the segment `[start, end]` as space-separated words.
 * `*needed` receives the byte length including the terminating NUL; the
 * text is written only when it fits in `capacity` bytes.
 *
 * # Safety
 * Handles must be live, `needed` valid, and `buf` valid for `capacity`
 * bytes (it may be null when `capacity` is 0).
 */
enum DcStatus dc_caption_segment(const struct DcModel *model,
                                 const struct DcVideo *video,
                                 double start,
                                 double end,
                                 char *buf,
                                 size_t capacity,
                                 size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DENSECAP_H */
