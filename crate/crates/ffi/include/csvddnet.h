#ifndef CSVDDNET_H
#define CSVDDNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Ball flavor for [`csvdd_ball_fit`].
 */
#define CSVDD_BALL_CSVDD 0

#define CSVDD_BALL_SVDD 1

/**
 * Result codes shared by every function of the C interface.
 */
typedef enum CsvddStatus {
  CSVDD_STATUS_OK = 0,
  CSVDD_STATUS_NULL_POINTER = 1,
  CSVDD_STATUS_INVALID_ARGUMENT = 2,
  CSVDD_STATUS_IO = 3,
  CSVDD_STATUS_FORMAT = 4,
  CSVDD_STATUS_DIMENSION_MISMATCH = 5,
  CSVDD_STATUS_SOLVER = 6,
  CSVDD_STATUS_MISSING_MEMBER = 7,
  CSVDD_STATUS_BUFFER_TOO_SMALL = 8,
  CSVDD_STATUS_PANIC = 9,
} CsvddStatus;

/**
 * A loaded model bundle.
 */
typedef struct CsvddModel CsvddModel;

/**
 * Geometry of one descriptor view.
 */
typedef struct CsvddView {
  size_t receptive_field;
  size_t pooling;
  size_t blocks;
  /**
   * Encoding outputs per patch.
   */
  size_t code_dim;
  /**
   * Descriptor length for this view.
   */
  size_t descriptor_dim;
} CsvddView;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *csvdd_version(void);

/**
 * Message describing the last failure on this thread, or NULL. The pointer
 * stays valid until the next call into the library from the same thread.
 */
const char *csvdd_last_error_message(void);

/**
 * Fits one ball to `n` points of dimension `dim` stored row-major.
 * `center_out` receives `dim` values.
 *
 * # Safety
 * `points` must hold `n * dim` doubles and `center_out` `dim` doubles.
 */
enum CsvddStatus csvdd_ball_fit(const double *points,
                                size_t n,
                                size_t dim,
                                double lambda,
                                int kind,
                                double *center_out,
                                double *radius_out);

/**
 * Loads a model bundle written by the command-line tool.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CsvddStatus csvdd_model_load(const char *path, struct CsvddModel **out);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`csvdd_model_load`] and not be used afterwards.
 */
void csvdd_model_free(struct CsvddModel *model);

/**
 * Number of descriptor views, 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t csvdd_model_view_count(const struct CsvddModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum CsvddStatus csvdd_model_view(const struct CsvddModel *model,
                                  size_t view,
                                  struct CsvddView *out);

/**
 * Number of classes of the trained classifier.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum CsvddStatus csvdd_model_class_count(const struct CsvddModel *model, size_t *out);

/**
 * Encodes one raw `r x r` patch (row-major intensities) for a view:
 * contrast normalization, whitening, then the view's encoding.
 *
 * # Safety
 * `patch` must hold `patch_len` doubles and `out` `out_len` doubles.
 */
enum CsvddStatus csvdd_model_encode_patch(const struct CsvddModel *model,
                                          size_t view,
                                          const double *patch,
                                          size_t patch_len,
                                          double *out,
                                          size_t out_len);

/**
 * Computes the descriptor of a `width x height` image (row-major
 * intensities in [0, 1]) for one view.
 *
 * # Safety
 * `pixels` must hold `width * height` doubles and `out` `out_len` doubles.
 */
enum CsvddStatus csvdd_model_describe(const struct CsvddModel *model,
                                      size_t view,
                                      const double *pixels,
                                      size_t width,
                                      size_t height,
                                      double *out,
                                      size_t out_len);

/**
 * Classifies an image with the stacked ensemble. When `scores_out` is not
 * NULL it receives one stacked score per class.
 *
 * # Safety
 * `pixels` must hold `width * height` doubles, `class_out` must be valid and
 * `scores_out`, if not NULL, must hold `scores_len` doubles.
 */
enum CsvddStatus csvdd_model_predict(const struct CsvddModel *model,
                                     const double *pixels,
                                     size_t width,
                                     size_t height,
                                     size_t *class_out,
                                     double *scores_out,
                                     size_t scores_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CSVDDNET_H */
