#ifndef URNET_H
#define URNET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UrnFusion {
  URN_FUSION_IDENTITY = 0,
  URN_FUSION_EXP = 1,
} UrnFusion;

typedef enum UrnStatus {
  URN_STATUS_OK = 0,
  URN_STATUS_NULL_POINTER = 1,
  URN_STATUS_INVALID_ARGUMENT = 2,
  URN_STATUS_SHAPE = 3,
  URN_STATUS_NON_FINITE = 4,
  URN_STATUS_CONFIG = 5,
  URN_STATUS_IO = 6,
  URN_STATUS_FORMAT = 7,
  URN_STATUS_VERSION = 8,
  URN_STATUS_DIVERGED = 9,
  URN_STATUS_PANIC = 10,
} UrnStatus;

typedef struct UrnDataset UrnDataset;

typedef struct UrnModel UrnModel;

/*
 Modality-dropout sampler with its own random stream.
 */
typedef struct UrnSampler UrnSampler;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message describing the last failure on this thread; empty after success.
 Valid until the next call on the same thread.
 */
const char *urn_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *urn_version(void);

/*
 Probability of dropping exactly `k` modalities.

 # Safety
 `out` must be valid for one write.
 */
enum UrnStatus urn_drop_pmf(double theta,
                            size_t n_max,
                            size_t min_available,
                            size_t modality_count,
                            size_t k,
                            double *out);

/*
 # Safety
 `out` must be valid for one write; the handle must be released with [`urn_sampler_free`].
 */
enum UrnStatus urn_sampler_new(double theta,
                               size_t n_max,
                               size_t min_available,
                               size_t modality_count,
                               uint64_t seed,
                               struct UrnSampler **out);

/*
 Draws one availability mask: `mask[i]` is 1 if modality `i` is kept.

 # Safety
 `sampler` must come from [`urn_sampler_new`]; `mask` must hold `len` bytes.
 */
enum UrnStatus urn_sampler_sample(struct UrnSampler *sampler, uint8_t *mask, size_t len);

/*
 # Safety
 `sampler` must come from [`urn_sampler_new`] or be null.
 */
void urn_sampler_free(struct UrnSampler *sampler);

/*
 Voxel-wise f-mean of `count` arrays of `len` floats stored back to back.

 # Safety
 `inputs` must hold `count * len` floats and `out` `len` floats.
 */
enum UrnStatus urn_fuse(const float *inputs,
                        size_t count,
                        size_t len,
                        enum UrnFusion fusion,
                        float *out);

/*
 Dice overlap of the voxels whose label is one of `region[..region_len]`.

 # Safety
 `pred` and `gt` must hold `len` bytes, `region` `region_len` bytes, `out` one double.
 */
enum UrnStatus urn_dice(const uint8_t *pred,
                        const uint8_t *gt,
                        size_t len,
                        const uint8_t *region,
                        size_t region_len,
                        double *out);

/*
 Peak signal-to-noise ratio in dB, capped at 99.

 # Safety
 `synth` and `gt` must hold `len` floats, `out` one double.
 */
enum UrnStatus urn_psnr(const float *synth,
                        const float *gt,
                        size_t len,
                        double data_range,
                        double *out);

/*
 Generates a phantom dataset in memory.

 # Safety
 `name` and `modalities` (comma-separated) must be NUL-terminated; `out` valid for one write.
 */
enum UrnStatus urn_dataset_generate(const char *name,
                                    const char *modalities,
                                    size_t samples,
                                    size_t size,
                                    uint64_t seed,
                                    struct UrnDataset **out);

/*
 # Safety
 `path` must be NUL-terminated; `out` valid for one write.
 */
enum UrnStatus urn_dataset_load(const char *path, struct UrnDataset **out);

/*
 # Safety
 `dataset` must be a live handle; `path` NUL-terminated.
 */
enum UrnStatus urn_dataset_save(const struct UrnDataset *dataset, const char *path);

/*
 Sample count, image height and width, and modality count.

 # Safety
 `dataset` must be a live handle; each out pointer valid for one write.
 */
enum UrnStatus urn_dataset_info(const struct UrnDataset *dataset,
                                size_t *samples,
                                size_t *height,
                                size_t *width,
                                size_t *modalities);

/*
 Copies one normalized image (`height * width` floats) of dataset modality `modality`.

 # Safety
 `dataset` must be a live handle; `out` must hold `len` floats.
 */
enum UrnStatus urn_dataset_image(const struct UrnDataset *dataset,
                                 size_t sample,
                                 size_t modality,
                                 float *out,
                                 size_t len);

/*
 Copies one label map (`height * width` bytes).

 # Safety
 `dataset` must be a live handle; `out` must hold `len` bytes.
 */
enum UrnStatus urn_dataset_labels(const struct UrnDataset *dataset,
                                  size_t sample,
                                  uint8_t *out,
                                  size_t len);

/*
 # Safety
 `dataset` must come from this library or be null.
 */
void urn_dataset_free(struct UrnDataset *dataset);

/*
 Loads a checkpoint directory.

 # Safety
 `path` must be NUL-terminated; `out` valid for one write.
 */
enum UrnStatus urn_model_load(const char *path, struct UrnModel **out);

/*
 # Safety
 `model` must be a live handle; `path` NUL-terminated.
 */
enum UrnStatus urn_model_save(const struct UrnModel *model, const char *path);

/*
 Number of input modalities the model expects.

 # Safety
 `model` must be a live handle; `out` valid for one write.
 */
enum UrnStatus urn_model_modality_count(const struct UrnModel *model, size_t *out);

/*
 Segments one dataset sample using the modalities marked 1 in `mask`.

 # Safety
 Handles must be live; `mask` must hold `mask_len` bytes and `labels` `len` bytes.
 */
enum UrnStatus urn_model_predict(const struct UrnModel *model,
                                 const struct UrnDataset *dataset,
                                 size_t sample,
                                 const uint8_t *mask,
                                 size_t mask_len,
                                 uint8_t *labels,
                                 size_t len);

/*
 # Safety
 `model` must come from this library or be null.
 */
void urn_model_free(struct UrnModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* URNET_H */
