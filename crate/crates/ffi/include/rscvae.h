#ifndef RSCVAE_H
#define RSCVAE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RscvaeStatus {
  RSCVAE_STATUS_OK = 0,
  RSCVAE_STATUS_NULL_POINTER = 1,
  RSCVAE_STATUS_INVALID_INPUT = 2,
  RSCVAE_STATUS_SHAPE = 3,
  RSCVAE_STATUS_PARSE = 4,
  RSCVAE_STATUS_IO = 5,
  RSCVAE_STATUS_CHECKPOINT = 6,
  RSCVAE_STATUS_NON_FINITE = 7,
  RSCVAE_STATUS_CONFIG = 8,
  RSCVAE_STATUS_DATA = 9,
  RSCVAE_STATUS_PANIC = 10,
} RscvaeStatus;

/**
 * A decoded IDX tensor.
 */
typedef struct RscvaeIdx RscvaeIdx;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct RscvaeModel RscvaeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, or an empty string. The pointer
 * stays valid until the next call into this library from the same thread.
 */
const char *rscvae_last_error(void);

/**
 * Loads a checkpoint file into a new model handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer to write to.
 */
enum RscvaeStatus rscvae_model_load(const char *path, struct RscvaeModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`rscvae_model_load`] and not have been freed.
 */
void rscvae_model_free(struct RscvaeModel *model);

/**
 * Latent dimension of the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t rscvae_model_latent_dim(const struct RscvaeModel *model);

/**
 * Writes the expected image shape (channels, height, width).
 *
 * # Safety
 * `model` must be a live handle; the outputs must be valid pointers.
 */
enum RscvaeStatus rscvae_model_input_shape(const struct RscvaeModel *model,
                                           size_t *channels,
                                           size_t *height,
                                           size_t *width);

/**
 * Per-image `mut` (latent divergence between encoding and recoding) and `recon`
 * (mean absolute pixel error) for `n` images laid out as `n × C × H × W` floats in [0, 1].
 *
 * # Safety
 * `images` must hold `n·C·H·W` floats; `mut_out` and `recon_out` must hold `n` doubles.
 */
enum RscvaeStatus rscvae_model_terms(const struct RscvaeModel *model,
                                     const float *images,
                                     size_t n,
                                     double *mut_out,
                                     double *recon_out);

/**
 * Posterior means, `n × D` floats.
 *
 * # Safety
 * `images` must hold `n·C·H·W` floats and `mean_out` `n·D` floats.
 */
enum RscvaeStatus rscvae_model_encode(const struct RscvaeModel *model,
                                      const float *images,
                                      size_t n,
                                      float *mean_out);

/**
 * `s = α·mut/E_mut + (1−α)·recon/E_recon` for `n` samples.
 *
 * # Safety
 * `mut_terms`, `recon_terms` and `out` must each hold `n` doubles.
 */
enum RscvaeStatus rscvae_score(const double *mut_terms,
                               const double *recon_terms,
                               size_t n,
                               double alpha,
                               double e_mut,
                               double e_recon,
                               double *out);

/**
 * AUROC of `scores` against 0/1 `labels` (1 = anomalous), ties counted one half.
 *
 * # Safety
 * `scores` and `labels` must hold `n` values; `out` must be valid.
 */
enum RscvaeStatus rscvae_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Closed-form KL(p ‖ q) between diagonal Gaussians of dimension `dim`.
 *
 * # Safety
 * Each parameter array must hold `dim` doubles; `out` must be valid.
 */
enum RscvaeStatus rscvae_kl_between(const double *p_mean,
                                    const double *p_log_var,
                                    const double *q_mean,
                                    const double *q_log_var,
                                    size_t dim,
                                    double *out);

/**
 * Moment-matched Jensen-Shannon divergence between diagonal Gaussians.
 *
 * # Safety
 * Each parameter array must hold `dim` doubles; `out` must be valid.
 */
enum RscvaeStatus rscvae_js_between(const double *p_mean,
                                    const double *p_log_var,
                                    const double *q_mean,
                                    const double *q_log_var,
                                    size_t dim,
                                    double *out);

/**
 * Parses an in-memory IDX file into a new handle.
 *
 * # Safety
 * `bytes` must hold `len` bytes and `out` must be a valid pointer to write to.
 */
enum RscvaeStatus rscvae_idx_parse(const uint8_t *bytes, size_t len, struct RscvaeIdx **out);

/**
 * Rank of a parsed tensor, or 0 for null.
 *
 * # Safety
 * `idx` must be null or a live handle.
 */
size_t rscvae_idx_rank(const struct RscvaeIdx *idx);

/**
 * Pointer to the `rank` dimension sizes, valid while the handle lives.
 *
 * # Safety
 * `idx` must be null or a live handle.
 */
const size_t *rscvae_idx_dims(const struct RscvaeIdx *idx);

/**
 * Number of elements in a parsed tensor, or 0 for null.
 *
 * # Safety
 * `idx` must be null or a live handle.
 */
size_t rscvae_idx_len(const struct RscvaeIdx *idx);

/**
 * Pointer to the decoded values (unsigned bytes scaled to [0, 1]), valid while the
 * handle lives.
 *
 * # Safety
 * `idx` must be null or a live handle.
 */
const double *rscvae_idx_data(const struct RscvaeIdx *idx);

/**
 * Releases a parsed tensor. Null is ignored.
 *
 * # Safety
 * `idx` must come from [`rscvae_idx_parse`] and not have been freed.
 */
void rscvae_idx_free(struct RscvaeIdx *idx);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RSCVAE_H */
