#ifndef SIS3D_H
#define SIS3D_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Overlap used by [`sis3d_map`].
 */
typedef enum {
  SIS3D_IOU_BOX = 0,
  SIS3D_IOU_MASK = 1,
} Sis3dIou;

/**
 * Result of every fallible call.
 */
typedef enum {
  SIS3D_STATUS_OK = 0,
  SIS3D_STATUS_NULL_ARGUMENT = 1,
  SIS3D_STATUS_INVALID_ARGUMENT = 2,
  SIS3D_STATUS_IO = 3,
  SIS3D_STATUS_FORMAT = 4,
  SIS3D_STATUS_SHAPE = 5,
  SIS3D_STATUS_NO_VIEWS = 6,
  SIS3D_STATUS_DIVERGENCE = 7,
  SIS3D_STATUS_OUT_OF_RANGE = 8,
  SIS3D_STATUS_PANIC = 9,
} Sis3dStatus;

/**
 * A list of detections owned by the library.
 */
typedef struct Sis3dDetections Sis3dDetections;

/**
 * Trained parameters together with the config they were built for.
 */
typedef struct Sis3dModel Sis3dModel;

/**
 * A fused scene: TSDF grid, camera views and ground truth.
 */
typedef struct Sis3dScene Sis3dScene;

/**
 * One detection in voxel coordinates.
 */
typedef struct {
  uint32_t class_id;
  double score;
  double min[3];
  double max[3];
  /**
   * Voxels in the instance mask; 0 when there is none.
   */
  size_t mask_len;
} Sis3dDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sis3d_version(void);

/**
 * Message of this thread's last failed call, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *sis3d_last_error(void);

/**
 * Synthesizes, scans and fuses one scene.
 *
 * # Safety
 * `config_json` is null or a NUL-terminated string; `out` is writable.
 */
Sis3dStatus sis3d_scene_synthesize(const char *config_json, uint64_t seed, Sis3dScene **out);

/**
 * Loads a scene folder written by `sis3d synth` and `sis3d fuse`.
 *
 * # Safety
 * `dir` is a NUL-terminated path; `out` is writable.
 */
Sis3dStatus sis3d_scene_load(const char *dir, Sis3dScene **out);

/**
 * Grid size in voxels.
 *
 * # Safety
 * `scene` is a live handle; `dims` points to three writable `size_t`.
 */
Sis3dStatus sis3d_scene_dims(const Sis3dScene *scene, size_t *dims);

/**
 * Copies the signed distances (in voxels, grid layout) into `buf`.
 *
 * # Safety
 * `buf` holds `len` writable floats.
 */
Sis3dStatus sis3d_scene_tsdf(const Sis3dScene *scene, float *buf, size_t len);

/**
 * # Safety
 * `scene` is null or a handle not yet freed.
 */
void sis3d_scene_free(Sis3dScene *scene);

/**
 * Freshly initialized model.
 *
 * # Safety
 * `config_json` is null or NUL-terminated; `out` is writable.
 */
Sis3dStatus sis3d_model_init(const char *config_json, uint64_t seed, Sis3dModel **out);

/**
 * Reads a checkpoint written by `sis3d train` or [`sis3d_model_save`].
 *
 * # Safety
 * `path` is NUL-terminated, `config_json` null or NUL-terminated, `out` writable.
 */
Sis3dStatus sis3d_model_load(const char *path, const char *config_json, Sis3dModel **out);

/**
 * # Safety
 * `model` is a live handle and `path` NUL-terminated.
 */
Sis3dStatus sis3d_model_save(const Sis3dModel *model, const char *path);

/**
 * # Safety
 * `model` is null or a handle not yet freed.
 */
void sis3d_model_free(Sis3dModel *model);

/**
 * Whole-scene detection, using the views that best cover the scene's surface.
 *
 * # Safety
 * `model` and `scene` are live handles; `out` is writable.
 */
Sis3dStatus sis3d_detect(const Sis3dModel *model, const Sis3dScene *scene, Sis3dDetections **out);

/**
 * The scene's ground-truth instances, each with score 1.
 *
 * # Safety
 * `scene` is a live handle; `out` is writable.
 */
Sis3dStatus sis3d_ground_truth(const Sis3dScene *scene, Sis3dDetections **out);

/**
 * Number of detections; 0 for null.
 *
 * # Safety
 * `dets` is null or a live handle.
 */
size_t sis3d_detections_len(const Sis3dDetections *dets);

/**
 * # Safety
 * `dets` is a live handle and `out` writable.
 */
Sis3dStatus sis3d_detection_get(const Sis3dDetections *dets, size_t index, Sis3dDetection *out);

/**
 * Copies the mask as `x, y, z` triples into `voxels`, which holds
 * `3 * capacity` entries.
 *
 * # Safety
 * `dets` is a live handle; `voxels` holds `3 * capacity` writable `uint32_t`.
 */
Sis3dStatus sis3d_detection_mask(const Sis3dDetections *dets,
                                 size_t index,
                                 uint32_t *voxels,
                                 size_t capacity);

/**
 * # Safety
 * `dets` is null or a handle not yet freed.
 */
void sis3d_detections_free(Sis3dDetections *dets);

/**
 * Single-scene mAP at one IoU threshold over `num_classes` classes,
 * leaving out classes without ground truth.
 *
 * # Safety
 * `preds` and `gts` are live handles; `out` is writable.
 */
Sis3dStatus sis3d_map(const Sis3dDetections *preds,
                      const Sis3dDetections *gts,
                      double iou,
                      Sis3dIou kind,
                      size_t num_classes,
                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIS3D_H */
