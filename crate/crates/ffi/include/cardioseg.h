#ifndef CARDIOSEG_H
#define CARDIOSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum CsStatus {
  CS_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  CS_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string was not valid UTF-8 or an enum value was out of range.
   */
  CS_STATUS_INVALID_ARGUMENT = 2,
  CS_STATUS_FORMAT = 3,
  CS_STATUS_SIZE_MISMATCH = 4,
  CS_STATUS_BOUNDS = 5,
  CS_STATUS_SHAPE = 6,
  CS_STATUS_NUMERIC = 7,
  CS_STATUS_CONFIG = 8,
  CS_STATUS_INCOMPATIBLE = 9,
  CS_STATUS_LOCALIZATION_FAILURE = 10,
  CS_STATUS_GRID = 11,
  CS_STATUS_UNDEFINED_DISTANCE = 12,
  CS_STATUS_COUNT_MISMATCH = 13,
  CS_STATUS_IO = 14,
  /**
   * The library panicked; the handle arguments should be considered poisoned.
   */
  CS_STATUS_PANIC = 15,
} CsStatus;

/**
 * On-disk element type for [`cs_volume_write`].
 */
typedef enum CsElementType {
  CS_ELEMENT_TYPE_SHORT = 0,
  CS_ELEMENT_TYPE_FLOAT = 1,
  CS_ELEMENT_TYPE_U_CHAR = 2,
} CsElementType;

/**
 * Binary mask.
 */
typedef struct CsLabel CsLabel;

/**
 * Three localizer networks plus the voxel classifier, with default
 * fusion and post-processing parameters.
 */
typedef struct CsPipeline CsPipeline;

/**
 * Intensity volume.
 */
typedef struct CsVolume CsVolume;

/**
 * Inclusive voxel box.
 */
typedef struct CsBox {
  size_t lo[3];
  size_t hi[3];
} CsBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cs_version(void);

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next `cs_*` call on the same thread.
 */
const char *cs_last_error(void);

/**
 * Copies `len` voxels (x fastest) into a new volume with zero origin.
 *
 * # Safety
 * `dims` and `spacing` point to 3 values, `data` to `len` values, `out` is writable.
 */
enum CsStatus cs_volume_new(const size_t *dims,
                            const double *spacing,
                            const double *data,
                            size_t len,
                            struct CsVolume **out);

/**
 * Reads a MetaImage volume.
 *
 * # Safety
 * `path` is a NUL-terminated string and `out` is writable.
 */
enum CsStatus cs_volume_read(const char *path, struct CsVolume **out);

/**
 * Writes a MetaImage volume. `etype` is a [`CsElementType`] value.
 *
 * # Safety
 * `vol` is a live handle, `path` a NUL-terminated string.
 */
enum CsStatus cs_volume_write(const struct CsVolume *vol, const char *path, uint32_t etype);

/**
 * # Safety
 * `vol` is a live handle; `dims` and `spacing` hold 3 writable values each (either may be null).
 */
enum CsStatus cs_volume_geometry(const struct CsVolume *vol, size_t *dims, double *spacing);

/**
 * Copies the voxels into `buf`, which must hold exactly the voxel count.
 *
 * # Safety
 * `vol` is a live handle and `buf` has room for `len` values.
 */
enum CsStatus cs_volume_copy_data(const struct CsVolume *vol, double *buf, size_t len);

/**
 * # Safety
 * `vol` is null or a handle not yet freed.
 */
void cs_volume_free(struct CsVolume *vol);

/**
 * Copies `len` mask bytes (non-zero = foreground) into a new label volume.
 *
 * # Safety
 * `dims` and `spacing` point to 3 values, `data` to `len` bytes, `out` is writable.
 */
enum CsStatus cs_label_new(const size_t *dims,
                           const double *spacing,
                           const uint8_t *data,
                           size_t len,
                           struct CsLabel **out);

/**
 * # Safety
 * `path` is a NUL-terminated string and `out` is writable.
 */
enum CsStatus cs_label_read(const char *path, struct CsLabel **out);

/**
 * # Safety
 * `label` is a live handle, `path` a NUL-terminated string.
 */
enum CsStatus cs_label_write(const struct CsLabel *label, const char *path);

/**
 * # Safety
 * `label` is a live handle; `dims` holds 3 writable values.
 */
enum CsStatus cs_label_dims(const struct CsLabel *label, size_t *dims);

/**
 * Number of foreground voxels.
 *
 * # Safety
 * `label` is a live handle and `count` is writable.
 */
enum CsStatus cs_label_count(const struct CsLabel *label, size_t *count);

/**
 * Copies the mask (0/1 bytes, x fastest) into `buf`.
 *
 * # Safety
 * `label` is a live handle and `buf` has room for `len` bytes.
 */
enum CsStatus cs_label_copy_data(const struct CsLabel *label, uint8_t *buf, size_t len);

/**
 * # Safety
 * `label` is null or a handle not yet freed.
 */
void cs_label_free(struct CsLabel *label);

/**
 * # Safety
 * `a` and `b` are live handles and `out` is writable.
 */
enum CsStatus cs_dice(const struct CsLabel *a, const struct CsLabel *b, double *out);

/**
 * Symmetric mean surface distance in mm, using the spacing of `a`.
 *
 * # Safety
 * `a` and `b` are live handles and `out` is writable.
 */
enum CsStatus cs_mean_surface_distance(const struct CsLabel *a,
                                       const struct CsLabel *b,
                                       double *out);

/**
 * Sensitivity and specificity inside `bbox`. An undefined rate is NaN.
 *
 * # Safety
 * `pred` and `reference` are live handles; `sensitivity` and `specificity` are writable.
 */
enum CsStatus cs_sensitivity_specificity(const struct CsLabel *pred,
                                         const struct CsLabel *reference,
                                         struct CsBox bbox,
                                         double *sensitivity,
                                         double *specificity);

/**
 * Generates one phantom with the default configuration, overriding dims and
 * spacing when the pointers are non-null.
 *
 * # Safety
 * `dims`/`spacing` are null or point to 3 values; `image`, `label` and `true_box` are writable.
 */
enum CsStatus cs_phantom_generate(const size_t *dims,
                                  const double *spacing,
                                  uint64_t seed,
                                  struct CsVolume **image,
                                  struct CsLabel **label,
                                  struct CsBox *true_box);

/**
 * Loads the four weight files into a pipeline with default parameters.
 *
 * # Safety
 * All paths are NUL-terminated strings and `out` is writable.
 */
enum CsStatus cs_pipeline_load(const char *localizer_axial,
                               const char *localizer_coronal,
                               const char *localizer_sagittal,
                               const char *segmenter,
                               struct CsPipeline **out);

/**
 * Segments a raw-intensity volume. On success `mask` receives a new label
 * handle, `bbox` the localized box and `empty` whether nothing cleared the
 * threshold. `bbox` and `empty` may be null.
 *
 * # Safety
 * `pipeline` and `image` are live handles; `mask` is writable.
 */
enum CsStatus cs_pipeline_segment(const struct CsPipeline *pipeline,
                                  const struct CsVolume *image,
                                  struct CsLabel **mask,
                                  struct CsBox *bbox,
                                  bool *empty);

/**
 * # Safety
 * `pipeline` is null or a handle not yet freed.
 */
void cs_pipeline_free(struct CsPipeline *pipeline);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CARDIOSEG_H */
