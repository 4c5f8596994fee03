#ifndef ECHOCAL_H
#define ECHOCAL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Side of the square input image in pixels.
 */
#define ECHOCAL_IMAGE_SIZE 256

/**
 * Landmarks per image; each is an `(x, y)` pair.
 */
#define ECHOCAL_NUM_LANDMARKS 6

/**
 * Measurements per image: IVS, LVID, LVPW.
 */
#define ECHOCAL_NUM_MEASUREMENTS 3

typedef enum EchocalStatus {
  ECHOCAL_STATUS_OK = 0,
  ECHOCAL_STATUS_NULL_POINTER = 1,
  ECHOCAL_STATUS_INVALID_ARGUMENT = 2,
  ECHOCAL_STATUS_IO = 3,
  ECHOCAL_STATUS_CHECKPOINT = 4,
  ECHOCAL_STATUS_MODEL = 5,
  ECHOCAL_STATUS_PANIC = 6,
} EchocalStatus;

/**
 * Opaque model handle.
 */
typedef struct EchocalModel EchocalModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *echocal_version(void);

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call into the library from the same thread.
 */
const char *echocal_last_error(void);

/**
 * Loads a checkpoint. On success `*out` owns a handle for [`echocal_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum EchocalStatus echocal_model_load(const char *path, struct EchocalModel **out);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`echocal_model_load`] and not be used afterwards.
 */
void echocal_model_free(struct EchocalModel *model);

/**
 * Number of trainable parameters.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum EchocalStatus echocal_model_parameter_count(const struct EchocalModel *model, size_t *out);

/**
 * Side of the network's input raster (the image is downsampled to it internally).
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum EchocalStatus echocal_model_input_size(const struct EchocalModel *model, size_t *out);

/**
 * Predicts landmarks for a 256x256 grayscale image, row-major, intensities in [0, 1].
 * Writes 12 values to `landmarks_out` and, when not NULL, 3 lengths to `lengths_out`.
 *
 * # Safety
 * `pixels` must hold `width * height` floats; output buffers must be large enough.
 */
enum EchocalStatus echocal_infer(struct EchocalModel *model,
                                 const float *pixels,
                                 size_t width,
                                 size_t height,
                                 double *landmarks_out,
                                 double *lengths_out);

/**
 * Renders the six label heatmaps, channel-major, into `out` (`out_len >= 6 * height * width`).
 *
 * # Safety
 * `landmarks` must hold 12 doubles and `out` `out_len` doubles.
 */
enum EchocalStatus echocal_encode_labels(const double *landmarks,
                                         size_t height,
                                         size_t width,
                                         double sigma_long,
                                         double variance_ratio,
                                         double *out,
                                         size_t out_len);

/**
 * Decodes six channel-major heatmaps to landmarks by soft centre of mass.
 * With `raw` set the channels are network scores and are softmax-normalized
 * first; otherwise they must be non-negative with positive mass.
 *
 * # Safety
 * `heatmaps` must hold `6 * height * width` doubles and `landmarks_out` 12.
 */
enum EchocalStatus echocal_decode_heatmaps(const double *heatmaps,
                                           size_t height,
                                           size_t width,
                                           bool raw,
                                           double *landmarks_out);

/**
 * Lengths of IVS, LVID and LVPW in pixels.
 *
 * # Safety
 * `landmarks` must hold 12 doubles and `lengths_out` 3.
 */
enum EchocalStatus echocal_measurements(const double *landmarks, double *lengths_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ECHOCAL_H */
