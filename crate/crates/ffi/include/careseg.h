#ifndef CARESEG_H
#define CARESEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Post-processing steps for [`cs_postprocess`] and [`cs_ensemble_predict`].
 */
#define CS_PP_DISCONNECTED_3D 1

#define CS_PP_DISCONNECTED_2D 2

#define CS_PP_TOPMOST_SLICE 4

#define CS_PP_OUTLIERS 8

#define CS_PP_ALL 15

/**
 * Treat low z as the base for top-most slice removal.
 */
#define CS_PP_BASE_AT_ZMIN 16

#define CS_SUBGROUP_D8 0

#define CS_SUBGROUP_M1 1

#define CS_SUBGROUP_M12 2

typedef enum CsStatus {
  CS_STATUS_OK = 0,
  CS_STATUS_NULL_POINTER = 1,
  CS_STATUS_INVALID_ARGUMENT = 2,
  CS_STATUS_IO = 3,
  CS_STATUS_FORMAT = 4,
  CS_STATUS_GEOMETRY_MISMATCH = 5,
  CS_STATUS_MODEL = 6,
  /**
   * The quantity is not defined for the inputs, e.g. a surface distance
   * with an empty mask.
   */
  CS_STATUS_UNDEFINED = 7,
  CS_STATUS_PANIC = 8,
} CsStatus;

/**
 * Trained models plus the grid they run on.
 */
typedef struct CsEnsemble CsEnsemble;

/**
 * Intensity volume.
 */
typedef struct CsImage CsImage;

/**
 * Label volume in stage-3 codes (BG 0, LV 1, MYO 2, MIT 3, MVO 4).
 */
typedef struct CsLabels CsLabels;

typedef struct CsSurfaceDistances {
  double hd;
  double hd95;
  double assd;
} CsSurfaceDistances;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cs_version(void);

/**
 * Length in bytes (without the NUL) of the last error message on this
 * thread, 0 if the last call succeeded.
 */
size_t cs_last_error_length(void);

/**
 * Copies the last error message, NUL-terminated and truncated to fit
 * `cap` bytes. Returns the number of bytes written without the NUL.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes.
 */
size_t cs_last_error_message(char *buf, size_t cap);

/**
 * Reads an intensity volume from an MVOL file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CsStatus cs_image_read(const char *path, struct CsImage **out);

/**
 * Builds an intensity volume from `nx*ny*nz` values, x fastest.
 *
 * # Safety
 * `dims` and `spacing` must point to 3 values, `data` to `len` values.
 */
enum CsStatus cs_image_new(const size_t *dims,
                           const float *spacing,
                           const float *data,
                           size_t len,
                           struct CsImage **out);

/**
 * # Safety
 * `img` must come from this library or be null.
 */
void cs_image_free(struct CsImage *img);

/**
 * Reads a label volume from an MVOL file; codes must be stage-3 codes.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CsStatus cs_labels_read(const char *path, struct CsLabels **out);

/**
 * Builds a label volume from `nx*ny*nz` codes, x fastest.
 *
 * # Safety
 * `dims` and `spacing` must point to 3 values, `data` to `len` values.
 */
enum CsStatus cs_labels_new(const size_t *dims,
                            const float *spacing,
                            const uint8_t *data,
                            size_t len,
                            struct CsLabels **out);

/**
 * # Safety
 * `labels` must be valid and `path` NUL-terminated.
 */
enum CsStatus cs_labels_write(const struct CsLabels *labels, const char *path);

/**
 * Writes the grid size to `dims[3]` and the spacing (mm) to `spacing[3]`.
 *
 * # Safety
 * `labels` must be valid; `dims` and `spacing` must have room for 3 values.
 */
enum CsStatus cs_labels_geometry(const struct CsLabels *labels, size_t *dims, float *spacing);

/**
 * Borrows the codes, x fastest. The pointer stays valid until the handle
 * is freed.
 *
 * # Safety
 * `labels`, `data` and `len` must be valid pointers.
 */
enum CsStatus cs_labels_data(const struct CsLabels *labels, const uint8_t **data, size_t *len);

/**
 * # Safety
 * `labels` must come from this library or be null.
 */
void cs_labels_free(struct CsLabels *labels);

/**
 * Applies the post-processing steps selected by `flags` (`CS_PP_*`).
 *
 * # Safety
 * `labels` and `out` must be valid pointers.
 */
enum CsStatus cs_postprocess(const struct CsLabels *labels, uint32_t flags, struct CsLabels **out);

/**
 * Dice score in percent of `label` between two volumes on the same grid.
 *
 * # Safety
 * All pointers must be valid.
 */
enum CsStatus cs_dice(const struct CsLabels *pred,
                      const struct CsLabels *gt,
                      uint8_t label,
                      double *out);

/**
 * Hausdorff, 95th-percentile Hausdorff and average symmetric surface
 * distance (mm). Returns `CS_STATUS_UNDEFINED` when either mask is empty.
 *
 * # Safety
 * All pointers must be valid.
 */
enum CsStatus cs_surface_distances(const struct CsLabels *pred,
                                   const struct CsLabels *gt,
                                   uint8_t label,
                                   struct CsSurfaceDistances *out);

/**
 * Volume of `label` in ml.
 *
 * # Safety
 * All pointers must be valid.
 */
enum CsStatus cs_volume_ml(const struct CsLabels *labels, uint8_t label, double *out);

/**
 * Loads every checkpoint in `models_dir`. `config_path` selects the
 * pipeline configuration (network grid); null uses the desk preset.
 *
 * # Safety
 * `models_dir` must be NUL-terminated, `config_path` NUL-terminated or
 * null, and `out` valid.
 */
enum CsStatus cs_ensemble_load(const char *models_dir,
                               const char *config_path,
                               struct CsEnsemble **out);

/**
 * Number of models in the ensemble, 0 for null.
 *
 * # Safety
 * `ens` must be valid or null.
 */
size_t cs_ensemble_len(const struct CsEnsemble *ens);

/**
 * Segments `image` for a patient of subgroup `subgroup` (`CS_SUBGROUP_*`).
 * The labels come back on the image grid, post-processed per `flags`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum CsStatus cs_ensemble_predict(const struct CsEnsemble *ens,
                                  const struct CsImage *image,
                                  uint32_t subgroup,
                                  uint32_t flags,
                                  struct CsLabels **out);

/**
 * # Safety
 * `ens` must come from this library or be null.
 */
void cs_ensemble_free(struct CsEnsemble *ens);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CARESEG_H */
