#ifndef DETR3D_H
#define DETR3D_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum Detr3dStatus {
  DETR3D_STATUS_OK = 0,
  DETR3D_STATUS_NULL_POINTER = 1,
  DETR3D_STATUS_INVALID_ARGUMENT = 2,
  DETR3D_STATUS_IO = 3,
  DETR3D_STATUS_PARSE = 4,
  DETR3D_STATUS_CHECKPOINT = 5,
  DETR3D_STATUS_CHECKPOINT_VERSION = 6,
  DETR3D_STATUS_NUMERIC = 7,
  DETR3D_STATUS_INTERNAL = 8,
  DETR3D_STATUS_PANIC = 9,
} Detr3dStatus;

// Opaque list of world-frame detections.
typedef struct Detr3dDetections Detr3dDetections;

// Opaque trained network.
typedef struct Detr3dModel Detr3dModel;

// Opaque point cloud, optionally with labelled boxes.
typedef struct Detr3dScene Detr3dScene;

// A box in world coordinates. `yaw` is the heading about +z in radians.
typedef struct Detr3dBox {
  double center[3];
  double size[3];
  double yaw;
  uint32_t class_id;
} Detr3dBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *detr3d_version(void);

// Message of the last failed call on this thread, or NULL after a
// success. Valid until the next call on the same thread.
const char *detr3d_last_error_message(void);

// IoU of two boxes. With `rotated` false the yaw is ignored.
//
// # Safety
// `a` and `b` must point to valid boxes and `out` to writable memory.
enum Detr3dStatus detr3d_iou(const struct Detr3dBox *a,
                             const struct Detr3dBox *b,
                             bool rotated,
                             double *out);

// Generalised IoU of two boxes.
//
// # Safety
// As for [`detr3d_iou`].
enum Detr3dStatus detr3d_giou(const struct Detr3dBox *a,
                              const struct Detr3dBox *b,
                              bool rotated,
                              double *out);

// Minimum-cost assignment of `cols` targets to `rows >= cols` predictions.
// `cost` is row-major `rows x cols`. `assignment[r]` receives the target
// of row `r` or -1.
//
// # Safety
// `cost` must hold `rows * cols` values, `assignment` room for `rows`
// values and `total_cost` must be writable.
enum Detr3dStatus detr3d_hungarian(const double *cost,
                                   size_t rows,
                                   size_t cols,
                                   int64_t *assignment,
                                   double *total_cost);

// Farthest point sampling of `k` of the `n` points (`xyz` holds `3n`
// values), starting from index `seed`. Indices go to `indices[0..k]`.
//
// # Safety
// `xyz` must hold `3n` values and `indices` room for `k`.
enum Detr3dStatus detr3d_fps(const double *xyz, size_t n, size_t k, size_t seed, size_t *indices);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `model` writable.
enum Detr3dStatus detr3d_model_load(const char *path, struct Detr3dModel **model);

// Freshly initialised network of a named preset (`desk`, `full`,
// `overfit`).
//
// # Safety
// `preset` must be a NUL-terminated string and `model` writable.
enum Detr3dStatus detr3d_model_new(const char *preset, uint64_t seed, struct Detr3dModel **model);

// Writes the model to a checkpoint file.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum Detr3dStatus detr3d_model_save(const struct Detr3dModel *model, const char *path);

// Number of object classes the model predicts.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum Detr3dStatus detr3d_model_num_classes(const struct Detr3dModel *model, size_t *out);

// Releases a model. NULL is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void detr3d_model_free(struct Detr3dModel *model);

// Reads a scene file.
//
// # Safety
// `path` must be a NUL-terminated string and `scene` writable.
enum Detr3dStatus detr3d_scene_read(const char *path, struct Detr3dScene **scene);

// Unlabelled scene from `n` world-frame points (`xyz` holds `3n`
// values). `oriented` selects the isotropic normalisation used for
// oriented boxes.
//
// # Safety
// `xyz` must hold `3n` values and `scene` be writable.
enum Detr3dStatus detr3d_scene_from_points(const double *xyz,
                                           size_t n,
                                           bool oriented,
                                           struct Detr3dScene **scene);

// # Safety
// `scene` must be a live handle and `out` writable.
enum Detr3dStatus detr3d_scene_num_points(const struct Detr3dScene *scene, size_t *out);

// Labelled boxes of a scene read from file.
//
// # Safety
// `scene` must be a live handle, `boxes` room for `capacity` boxes and
// `count` writable. `count` receives the total even when it exceeds
// `capacity`; only the first `capacity` boxes are copied.
enum Detr3dStatus detr3d_scene_boxes(const struct Detr3dScene *scene,
                                     struct Detr3dBox *boxes,
                                     size_t capacity,
                                     size_t *count);

// Releases a scene. NULL is ignored.
//
// # Safety
// `scene` must come from this library and not be used afterwards.
void detr3d_scene_free(struct Detr3dScene *scene);

// Runs the detector on a scene. `num_queries` and `depth` of 0 keep the
// model's configured values. NMS is applied when `nms_threshold > 0`.
//
// # Safety
// `model` and `scene` must be live handles and `detections` writable.
enum Detr3dStatus detr3d_predict(const struct Detr3dModel *model,
                                 const struct Detr3dScene *scene,
                                 size_t num_queries,
                                 size_t depth,
                                 double nms_threshold,
                                 struct Detr3dDetections **detections);

// # Safety
// `detections` must be a live handle and `out` writable.
enum Detr3dStatus detr3d_detections_len(const struct Detr3dDetections *detections, size_t *out);

// Box and score of detection `index`.
//
// # Safety
// `detections` must be a live handle; `bbox` and `score` writable.
enum Detr3dStatus detr3d_detections_get(const struct Detr3dDetections *detections,
                                        size_t index,
                                        struct Detr3dBox *bbox,
                                        double *score);

// Releases a detection list. NULL is ignored.
//
// # Safety
// `detections` must come from this library and not be used afterwards.
void detr3d_detections_free(struct Detr3dDetections *detections);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DETR3D_H */
