#ifndef RIW_H
#define RIW_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum RiwStatus {
  RIW_STATUS_OK = 0,
  RIW_STATUS_NULL_POINTER = 1,
  RIW_STATUS_INVALID_ARGUMENT = 2,
  RIW_STATUS_IO = 3,
  RIW_STATUS_CONFIG = 4,
  RIW_STATUS_MISSING_ARTIFACT = 5,
  RIW_STATUS_FAILED = 6,
  RIW_STATUS_PANIC = 7,
} RiwStatus;

/**
 * Per-segment decodes of one image.
 */
typedef struct RiwExtraction RiwExtraction;

/**
 * An RGB or grayscale image with samples in [0, 1].
 */
typedef struct RiwImage RiwImage;

/**
 * A trained experiment directory with its codec and extractor loaded.
 */
typedef struct RiwRun RiwRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *riw_last_error_message(void);

/**
 * Reads an 8-bit PNG.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RiwStatus riw_image_load(const char *path, struct RiwImage **out);

/**
 * Builds an RGB image from `height * width * 3` interleaved bytes.
 *
 * # Safety
 * `data` must point to `height * width * 3` readable bytes and `out` must be valid.
 */
enum RiwStatus riw_image_from_rgb8(const uint8_t *data,
                                   size_t height,
                                   size_t width,
                                   struct RiwImage **out);

/**
 * Writes an 8-bit PNG.
 *
 * # Safety
 * `img` must come from this library and `path` be a NUL-terminated string.
 */
enum RiwStatus riw_image_save(const struct RiwImage *img, const char *path);

/**
 * Reports channels, height and width.
 *
 * # Safety
 * `img` must come from this library; the output pointers must be valid.
 */
enum RiwStatus riw_image_shape(const struct RiwImage *img,
                               size_t *channels,
                               size_t *height,
                               size_t *width);

/**
 * Largest absolute per-sample difference between two images of equal shape.
 *
 * # Safety
 * Both images must come from this library and `out` must be valid.
 */
enum RiwStatus riw_image_linf_distance(const struct RiwImage *a,
                                       const struct RiwImage *b,
                                       double *out);

/**
 * # Safety
 * `img` must come from this library or be null, and must not be used afterwards.
 */
void riw_image_free(struct RiwImage *img);

/**
 * Opens an experiment directory whose codec and extraction stages have run.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RiwStatus riw_run_open(const char *dir, struct RiwRun **out);

/**
 * Embeds the run's watermark into `img` with its injection settings.
 * The result is quantized to 8 bits within the budget when the norm is L-infinity.
 *
 * # Safety
 * `run` and `img` must come from this library; `out` must be valid and
 * `budget` valid or null.
 */
enum RiwStatus riw_run_inject(const struct RiwRun *run,
                              const struct RiwImage *img,
                              struct RiwImage **out,
                              double *budget);

/**
 * Decodes every segment of `img`. `truth` may be null.
 *
 * # Safety
 * `run` and `img` must come from this library, `truth` must be null or a
 * NUL-terminated string, and `out` must be valid.
 */
enum RiwStatus riw_run_extract(const struct RiwRun *run,
                               const struct RiwImage *img,
                               const char *truth,
                               struct RiwExtraction **out);

/**
 * # Safety
 * `run` must come from this library or be null, and must not be used afterwards.
 */
void riw_run_free(struct RiwRun *run);

/**
 * Number of segments, or 0 for a null handle.
 *
 * # Safety
 * `ext` must come from this library or be null.
 */
size_t riw_extraction_segment_count(const struct RiwExtraction *ext);

/**
 * Copies the decoded text of segment `index` into `buf` with a trailing NUL.
 * `required` receives the buffer size needed, including the NUL.
 *
 * # Safety
 * `ext` must come from this library, `buf` must hold `len` bytes or be null
 * when `len` is 0, and `required` must be valid or null.
 */
enum RiwStatus riw_extraction_decoded(const struct RiwExtraction *ext,
                                      size_t index,
                                      char *buf,
                                      size_t len,
                                      size_t *required);

/**
 * Writes 1 when segment `index` matches the truth, 0 when it does not, and -1
 * when no truth was supplied. `confidence` receives the mean glyph confidence.
 *
 * # Safety
 * `ext` must come from this library and the output pointers must be valid.
 */
enum RiwStatus riw_extraction_segment(const struct RiwExtraction *ext,
                                      size_t index,
                                      int *correct,
                                      double *confidence);

/**
 * # Safety
 * `ext` must come from this library or be null, and must not be used afterwards.
 */
void riw_extraction_free(struct RiwExtraction *ext);

/**
 * Runs the command-line interface with `argv[0..argc]` and returns its exit code.
 *
 * # Safety
 * `argv` must point to `argc` NUL-terminated strings.
 */
int riw_cli_main(int argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RIW_H */
