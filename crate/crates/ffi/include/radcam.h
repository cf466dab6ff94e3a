#ifndef RADCAM_H
#define RADCAM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum RadcamStatus {
  RadcamStatusOk = 0,
  RadcamStatusNullArgument = 1,
  RadcamStatusInvalidUtf8 = 2,
  RadcamStatusIo = 3,
  RadcamStatusBadCheckpoint = 4,
  RadcamStatusBadDimensions = 5,
  RadcamStatusNumeric = 6,
  RadcamStatusPanic = 7,
} RadcamStatus;

/**
 * Opaque trained model handle.
 */
typedef struct RadcamModel RadcamModel;

/**
 * Camera and BEV projection geometry for one calibration call.
 */
typedef struct RadcamSceneParams {
  double fx;
  double fy;
  double cx;
  double cy;
  double bev_sx;
  double bev_sz;
  double bev_cx;
  double bev_cz;
  double camera_height;
} RadcamSceneParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent error on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *radcam_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *radcam_version(void);

/**
 * Loads a trained checkpoint from `path` into a new model handle.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out_model` a valid
 * pointer to receive the handle. Free the handle with [`radcam_model_free`].
 */
enum RadcamStatus radcam_model_load(const char *path, struct RadcamModel **out_model);

/**
 * Releases a model handle. A NULL handle is a no-op.
 *
 * # Safety
 * `model` must be a handle returned by [`radcam_model_load`], not yet freed.
 */
void radcam_model_free(struct RadcamModel *model);

/**
 * Number of refine-and-rerender iterations the model runs per calibration.
 *
 * # Safety
 * `model` must be a live handle from [`radcam_model_load`].
 */
uint32_t radcam_model_iterations(const struct RadcamModel *model);

/**
 * Expected depth-map dimensions (rows, cols) for this model.
 *
 * # Safety
 * `model` must be a live handle; `out_h`/`out_w` valid writable pointers.
 */
enum RadcamStatus radcam_model_depth_dims(const struct RadcamModel *model,
                                          uint32_t *out_h,
                                          uint32_t *out_w);

/**
 * Runs iterative calibration.
 *
 * Inputs: `radar_xyz` is `radar_count * 3` floats (radar-frame points,
 * row-major XYZ); `depth` is a `depth_h x depth_w` row-major metric depth
 * map (0 = no return) matching the model's expected dimensions;
 * `t_init` is the initial radar-to-camera extrinsic as a row-major 4x4
 * matrix. Outputs: `out_t` receives the refined 4x4 extrinsic; when
 * `out_steps` is non-NULL it receives one row-major 4x4 per iteration
 * (`radcam_model_iterations` matrices).
 *
 * # Safety
 * All pointers must be valid for the stated element counts; buffers must
 * not alias `out_t`/`out_steps`.
 */
enum RadcamStatus radcam_calibrate(const struct RadcamModel *model,
                                   const float *radar_xyz,
                                   uintptr_t radar_count,
                                   const float *depth,
                                   uintptr_t depth_h,
                                   uintptr_t depth_w,
                                   struct RadcamSceneParams scene,
                                   const double *t_init,
                                   double *out_t,
                                   double *out_steps);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RADCAM_H */
