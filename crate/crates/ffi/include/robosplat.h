#ifndef ROBOSPLAT_H
#define ROBOSPLAT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum RsStatus {
  RS_STATUS_OK = 0,
  RS_STATUS_NULL_POINTER = 1,
  RS_STATUS_INVALID_ARGUMENT = 2,
  RS_STATUS_IO = 3,
  RS_STATUS_FORMAT = 4,
  RS_STATUS_FAILED = 5,
  RS_STATUS_PANIC = 6,
} RsStatus;

// A loaded model.
typedef struct RsModel RsModel;

// Pinhole camera with an axis-angle world-to-camera rotation.
typedef struct RsCamera {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
  double rotation[3];
  double translation[3];
} RsCamera;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or an empty string.
// The pointer stays valid until the next failing call on the same thread.
const char *rs_last_error(void);

// Loads a checkpoint. On success `*out` receives a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum RsStatus rs_model_load(const char *path, struct RsModel **out);

// Releases a handle from [`rs_model_load`]. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void rs_model_free(struct RsModel *model);

// Degrees of freedom (pose length), or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t rs_model_dof(const struct RsModel *model);

// Number of Gaussians, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t rs_model_gaussian_count(const struct RsModel *model);

// Renders `model` at `pose` into `out`, an RGB buffer of
// `height * width * 3` floats in row-major order. `background` is three
// values or null for black.
//
// # Safety
// `model` must be a live handle, `pose` must hold `pose_len` values,
// `camera` must be readable, and `out` must hold `out_len` floats.
enum RsStatus rs_render(const struct RsModel *model,
                        const double *pose,
                        uintptr_t pose_len,
                        const struct RsCamera *camera,
                        const double *background,
                        float *out,
                        uintptr_t out_len);

// Pulls an image cotangent `dL/dI` (same layout as [`rs_render`]'s
// output) back to `dL/dp`, written to `grad` (`pose_len` values).
//
// # Safety
// As [`rs_render`]; `cotangent` must hold `cotangent_len` floats and
// `grad` must have room for `pose_len` values.
enum RsStatus rs_pose_gradient(const struct RsModel *model,
                               const double *pose,
                               uintptr_t pose_len,
                               const struct RsCamera *camera,
                               const double *background,
                               const float *cotangent,
                               uintptr_t cotangent_len,
                               double *grad);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ROBOSPLAT_H */
