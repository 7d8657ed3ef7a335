/* C interface for the vheat heat-conduction backbone. */

#ifndef VHEAT_H
#define VHEAT_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Success.
 */
#define VHEAT_OK 0

/**
 * A pointer argument was null or a length was inconsistent.
 */
#define VHEAT_ERR_ARGUMENT 1

/**
 * A string was not valid UTF-8 or a config failed to parse/validate.
 */
#define VHEAT_ERR_CONFIG 2

/**
 * File input/output failed.
 */
#define VHEAT_ERR_IO 3

/**
 * The numerical core rejected the operation.
 */
#define VHEAT_ERR_RUNTIME 4

/**
 * A panic was caught at the boundary; state may be stale but memory is safe.
 */
#define VHEAT_ERR_PANIC 5

/**
 * Opaque trained-or-initialized model. The precision it computes in was
 * fixed by its configuration (`dtype`); the C surface always exchanges
 * `float` buffers and converts at the edge.
 */
typedef struct VheatModel VheatModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *vheat_version(void);

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread. Never null.
 */
const char *vheat_last_error(void);

/**
 * Build a freshly initialized model from a JSON configuration (the same
 * schema the CLI accepts) and a seed. On success `*out` owns the model.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a valid pointer.
 */
int32_t vheat_model_build(const char *config_json, uint64_t seed, struct VheatModel **out);

/**
 * Load a model from a checkpoint file. On success `*out` owns the model.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
int32_t vheat_model_load(const char *path, struct VheatModel **out);

/**
 * Write a model to a checkpoint file (bitwise round-trippable).
 *
 * # Safety
 * `model` must come from a build/load call; `path` must be NUL-terminated.
 */
int32_t vheat_model_save(const struct VheatModel *model, const char *path);

/**
 * Number of scalar parameters in the model.
 *
 * # Safety
 * `model` must come from a build/load call; `out` must be a valid pointer.
 */
int32_t vheat_model_num_params(const struct VheatModel *model, uintptr_t *out);

/**
 * Side of the square input the model expects (images are `[batch, 3, e, e]`).
 *
 * # Safety
 * `model` must come from a build/load call; `out` must be a valid pointer.
 */
int32_t vheat_model_input_extent(const struct VheatModel *model, uintptr_t *out);

/**
 * Classify a batch. `images` holds `batch * 3 * e * e` floats (`e` from
 * [`vheat_model_input_extent`]); `logits` receives `batch * num_classes`
 * floats and `logits_len` must say exactly that.
 *
 * # Safety
 * `model` must come from a build/load call; both buffers must be valid for
 * the stated lengths.
 */
int32_t vheat_model_forward(const struct VheatModel *model,
                            const float *images,
                            uintptr_t images_len,
                            uintptr_t batch,
                            float *logits,
                            uintptr_t logits_len);

/**
 * Release a model handle. Null is a no-op; a handle must not be used after.
 *
 * # Safety
 * `model` must come from a build/load call and not have been freed before.
 */
void vheat_model_free(struct VheatModel *model);

/**
 * Evolve `field` (`channels * m * n` floats, row-major `[C, M, N]`) by
 * heat conduction with uniform diffusivity `k` for time `t`, writing the
 * result to `out` (same length). `field` and `out` may alias exactly.
 *
 * # Safety
 * Both buffers must be valid for `channels * m * n` floats.
 */
int32_t vheat_hco_apply(const float *field,
                        uintptr_t channels,
                        uintptr_t m,
                        uintptr_t n,
                        float k,
                        float t,
                        float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VHEAT_H */
