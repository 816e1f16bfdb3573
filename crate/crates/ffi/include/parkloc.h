#ifndef PARKLOC_H
#define PARKLOC_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PklStatus {
  PKL_STATUS_OK = 0,
  PKL_STATUS_NULL_ARGUMENT = 1,
  PKL_STATUS_INVALID_UTF8 = 2,
  PKL_STATUS_INVALID_INPUT = 3,
  PKL_STATUS_IO = 4,
  PKL_STATUS_DECODE = 5,
  PKL_STATUS_SHAPE = 6,
  PKL_STATUS_FORMAT = 7,
  PKL_STATUS_PARSE = 8,
  PKL_STATUS_DIMENSION_MISMATCH = 9,
  PKL_STATUS_BUILD = 10,
  PKL_STATUS_LOAD = 11,
  PKL_STATUS_EVALUATION = 12,
  PKL_STATUS_PANIC = 13,
} PklStatus;

typedef struct PklImage PklImage;

typedef struct PklIndex PklIndex;

typedef struct PklLocalization PklLocalization;

typedef struct PklMatchList PklMatchList;

typedef struct PklPyramid PklPyramid;

/**
 * Matcher settings.
 */
typedef struct PklMatchParams {
  double temperature;
  double threshold;
  size_t window;
  double fine_temperature;
} PklMatchParams;

/**
 * One refined correspondence in preprocessed-image pixels.
 */
typedef struct PklMatch {
  double xa;
  double ya;
  double xb;
  double yb;
  double confidence;
  bool clamped;
} PklMatch;

/**
 * Axis-aligned box in preprocessed-image pixels; edges are inclusive.
 */
typedef struct PklBox {
  double x_min;
  double y_min;
  double x_max;
  double y_max;
} PklBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *pkl_last_error_message(void);

const char *pkl_version(void);

struct PklMatchParams pkl_match_params_default(void);

/**
 * Decodes and preprocesses an image file. A target of 0 keeps its size.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum PklStatus pkl_image_load(const char *path, uint32_t target_long_side, struct PklImage **out);

/**
 * Wraps `width * height` row-major intensities in `[0, 1]`.
 *
 * # Safety
 * `pixels` must point to `width * height` floats; `id` must be a valid C
 * string and `out` a valid pointer.
 */
enum PklStatus pkl_image_from_gray(const char *id,
                                   const float *pixels,
                                   size_t width,
                                   size_t height,
                                   struct PklImage **out);

/**
 * # Safety
 * All pointers must be valid.
 */
enum PklStatus pkl_image_size(const struct PklImage *image, size_t *width, size_t *height);

/**
 * # Safety
 * `image` must be NULL or a handle from this library, not yet freed.
 */
void pkl_image_free(struct PklImage *image);

/**
 * Extracts features. With `features_dir` NULL the built-in descriptor is
 * used; otherwise `<features_dir>/<source_id>.pklf` is loaded.
 *
 * # Safety
 * `image` must be a live handle, `features_dir` NULL or a valid C string,
 * `out` a valid pointer.
 */
enum PklStatus pkl_extract(const struct PklImage *image,
                           const char *features_dir,
                           struct PklPyramid **out);

/**
 * # Safety
 * `pyramid` must be a live handle and `path` a valid C string.
 */
enum PklStatus pkl_pyramid_save(const struct PklPyramid *pyramid, const char *path);

/**
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum PklStatus pkl_pyramid_load(const char *path, struct PklPyramid **out);

/**
 * Coarse grid size and number of cells with texture.
 *
 * # Safety
 * All pointers must be valid.
 */
enum PklStatus pkl_pyramid_coarse_shape(const struct PklPyramid *pyramid,
                                        size_t *rows,
                                        size_t *cols,
                                        size_t *textured);

/**
 * # Safety
 * `pyramid` must be NULL or a live handle.
 */
void pkl_pyramid_free(struct PklPyramid *pyramid);

/**
 * Coarse-to-fine matching of two pyramids. `params` may be NULL for
 * defaults.
 *
 * # Safety
 * Handles must be live; `params` NULL or valid; `out` valid.
 */
enum PklStatus pkl_match(const struct PklPyramid *a,
                         const struct PklPyramid *b,
                         const struct PklMatchParams *params,
                         struct PklMatchList **out);

/**
 * # Safety
 * `list` must be NULL or a live handle.
 */
size_t pkl_match_list_len(const struct PklMatchList *list);

/**
 * Pointer to `pkl_match_list_len` contiguous matches, owned by the list.
 *
 * # Safety
 * `list` must be NULL or a live handle.
 */
const struct PklMatch *pkl_match_list_data(const struct PklMatchList *list);

/**
 * # Safety
 * `list` must be NULL or a live handle.
 */
void pkl_match_list_free(struct PklMatchList *list);

/**
 * Loads an index directory written by the `index` command.
 *
 * # Safety
 * `dir` must be a valid C string and `out` a valid pointer.
 */
enum PklStatus pkl_index_load(const char *dir, struct PklIndex **out);

/**
 * # Safety
 * `index` must be NULL or a live handle.
 */
size_t pkl_index_len(const struct PklIndex *index);

/**
 * Section of entry `i`, or NULL when out of range. Owned by the index.
 *
 * # Safety
 * `index` must be NULL or a live handle.
 */
const char *pkl_index_entry_section(const struct PklIndex *index, size_t i);

/**
 * # Safety
 * `index` must be NULL or a live handle.
 */
void pkl_index_free(struct PklIndex *index);

/**
 * Localizes a query pyramid. `boxes` (may be NULL when `n_boxes` is 0)
 * are vehicle boxes in the query's preprocessed frame; `vehicle_filter`
 * enables removal of matches on vehicles. `params` may be NULL.
 *
 * # Safety
 * Handles must be live, `boxes` must point to `n_boxes` boxes, `out` valid.
 */
enum PklStatus pkl_localize(const struct PklIndex *index,
                            const struct PklPyramid *query,
                            const struct PklBox *boxes,
                            size_t n_boxes,
                            const struct PklMatchParams *params,
                            bool vehicle_filter,
                            struct PklLocalization **out);

/**
 * # Safety
 * `r` must be NULL or a live handle.
 */
size_t pkl_localization_best_index(const struct PklLocalization *r);

/**
 * # Safety
 * `r` must be NULL or a live handle.
 */
const char *pkl_localization_best_entry(const struct PklLocalization *r);

/**
 * # Safety
 * `r` must be NULL or a live handle.
 */
const char *pkl_localization_predicted_section(const struct PklLocalization *r);

/**
 * # Safety
 * `r` must be NULL or a live handle.
 */
double pkl_localization_second_best_ratio(const struct PklLocalization *r);

/**
 * Surviving and raw match counts for entry `i`. Fails when `i` is out of
 * range.
 *
 * # Safety
 * `r` must be a live handle; outputs must be valid pointers.
 */
enum PklStatus pkl_localization_count(const struct PklLocalization *r,
                                      size_t i,
                                      size_t *count,
                                      size_t *raw_count);

/**
 * # Safety
 * `r` must be NULL or a live handle.
 */
void pkl_localization_free(struct PklLocalization *r);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PARKLOC_H */
