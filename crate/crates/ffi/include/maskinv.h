#ifndef MASKINV_H
#define MASKINV_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MaskinvGradPath {
  MASKINV_GRAD_PATH_VANILLA = 0,
  MASKINV_GRAD_PATH_DECOMPOSED = 1,
} MaskinvGradPath;

/**
 * Result codes.
 */
typedef enum MaskinvStatus {
  MASKINV_STATUS_OK = 0,
  MASKINV_STATUS_NULL_POINTER = 1,
  MASKINV_STATUS_INVALID_ARGUMENT = 2,
  MASKINV_STATUS_IO = 3,
  MASKINV_STATUS_PARSE = 4,
  MASKINV_STATUS_LOAD = 5,
  MASKINV_STATUS_USAGE = 6,
  MASKINV_STATUS_INTERNAL = 7,
} MaskinvStatus;

/**
 * Cached activations of one encoded image.
 */
typedef struct MaskinvActivations MaskinvActivations;

/**
 * A loaded encoder.
 */
typedef struct MaskinvModel MaskinvModel;

/**
 * Inversion settings; start from [`maskinv_inversion_config_default`].
 */
typedef struct MaskinvInversionConfig {
  size_t steps;
  double alpha;
  double learning_rate;
  double epsilon;
  enum MaskinvGradPath grad_path;
} MaskinvInversionConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library on the same thread.
 */
const char *maskinv_last_error_message(void);

struct MaskinvInversionConfig maskinv_inversion_config_default(void);

/**
 * Loads a weight container with its JSON config. With `resample_pos`
 * nonzero a positional grid of another size is resampled.
 *
 * # Safety
 * Paths must be nul-terminated strings; `out` must be writable.
 */
enum MaskinvStatus maskinv_model_load(const char *weights_path,
                                      const char *config_path,
                                      int32_t resample_pos,
                                      struct MaskinvModel **out);

/**
 * # Safety
 * `model` must come from [`maskinv_model_load`] and not be used afterwards.
 */
void maskinv_model_free(struct MaskinvModel *model);

/**
 * Side of the square input image in pixels, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t maskinv_model_image_size(const struct MaskinvModel *model);

/**
 * Length of embeddings, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t maskinv_model_joint_dim(const struct MaskinvModel *model);

/**
 * Side of the patch grid (and of explainability maps), 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t maskinv_model_grid_size(const struct MaskinvModel *model);

/**
 * Encodes a normalized `3 × S × S` channel-major image.
 *
 * # Safety
 * `pixels` must hold `len` floats; `out` must be writable.
 */
enum MaskinvStatus maskinv_encode(const struct MaskinvModel *model,
                                  const float *pixels,
                                  size_t len,
                                  struct MaskinvActivations **out);

/**
 * # Safety
 * `acts` must come from [`maskinv_encode`] and not be used afterwards.
 */
void maskinv_activations_free(struct MaskinvActivations *acts);

/**
 * Copies the projected class token into `out`.
 *
 * # Safety
 * `out` must hold `len` floats.
 */
enum MaskinvStatus maskinv_activations_cls(const struct MaskinvActivations *acts,
                                           float *out,
                                           size_t len);

/**
 * Inverts `mask_count` binary masks of `S × S` bytes each (nonzero is
 * foreground), laid out back to back. Embeddings are written row by row
 * to `out`, which must hold `mask_count × joint_dim` floats.
 *
 * # Safety
 * Pointers must be valid for the given lengths; `config` may be null for
 * the defaults.
 */
enum MaskinvStatus maskinv_invert(const struct MaskinvModel *model,
                                  const struct MaskinvActivations *acts,
                                  const uint8_t *masks,
                                  size_t mask_count,
                                  const struct MaskinvInversionConfig *config,
                                  float *out,
                                  size_t out_len);

/**
 * Writes the `g × g` explainability map of `embedding` in `[0, 1]`,
 * row-major, to `out`.
 *
 * # Safety
 * `embedding` must hold `dim` floats and `out` `out_len` floats.
 */
enum MaskinvStatus maskinv_explain(const struct MaskinvModel *model,
                                   const struct MaskinvActivations *acts,
                                   const float *embedding,
                                   size_t dim,
                                   float *out,
                                   size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MASKINV_H */
