#ifndef WHITENET_H
#define WHITENET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WnStatus {
  WN_STATUS_OK = 0,
  WN_STATUS_NULL_POINTER = 1,
  WN_STATUS_INVALID_ARGUMENT = 2,
  WN_STATUS_NUMERICAL_INPUT = 3,
  WN_STATUS_LINEAR_ALGEBRA = 4,
  WN_STATUS_UNINITIALIZED = 5,
  WN_STATUS_CONFIG = 6,
  WN_STATUS_PARSE = 7,
  WN_STATUS_IO = 8,
  WN_STATUS_NAN_LOSS = 9,
  WN_STATUS_CHECKPOINT = 10,
  WN_STATUS_PANIC = 11,
} WnStatus;

/**
 * Covariance normaliser, mirrors `whitenet::whitening::CovarianceDivisor`.
 */
typedef enum WnDivisor {
  WN_DIVISOR_SAMPLES = 0,
  WN_DIVISOR_CHANNELS = 1,
} WnDivisor;

/**
 * Opaque GRBS batch generator.
 */
typedef struct WnGrbsSampler WnGrbsSampler;

/**
 * Opaque GRBS group plan.
 */
typedef struct WnGroupPlan WnGroupPlan;

/**
 * Opaque whitening layer state.
 */
typedef struct WnWhitening WnWhitening;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL. The pointer
 * stays valid until the next library call on the same thread.
 */
const char *wn_last_error_message(void);

/**
 * Releases a string returned by the library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void wn_string_free(char *s);

/**
 * Creates a whitening layer for `channels` channels.
 *
 * # Safety
 * `out` must be a valid pointer to write the handle to.
 */
enum WnStatus wn_whitening_new(size_t channels,
                               double epsilon,
                               double momentum,
                               enum WnDivisor divisor,
                               struct WnWhitening **out);

/**
 * # Safety
 * `h` must be NULL or a handle from [`wn_whitening_new`] not yet freed.
 */
void wn_whitening_free(struct WnWhitening *h);

/**
 * Whitens a training batch with its own statistics and remembers the batch
 * for a subsequent [`wn_whitening_backward`]. Running statistics are not
 * touched; call [`wn_whitening_update_running`] for that.
 *
 * # Safety
 * `data` and `out` must each hold `channels * samples` doubles.
 */
enum WnStatus wn_whitening_forward(struct WnWhitening *h,
                                   const double *data,
                                   size_t channels,
                                   size_t samples,
                                   double *out);

/**
 * Back-propagates `grad_output` through the last forward batch.
 * `degenerate_pairs` may be NULL.
 *
 * # Safety
 * `grad_output` and `grad_input` must each hold `channels * samples` doubles.
 */
enum WnStatus wn_whitening_backward(const struct WnWhitening *h,
                                    const double *grad_output,
                                    size_t channels,
                                    size_t samples,
                                    double *grad_input,
                                    size_t *degenerate_pairs);

/**
 * Folds the last batch statistics into the running averages.
 *
 * # Safety
 * `h` must be a live handle.
 */
enum WnStatus wn_whitening_update_running(struct WnWhitening *h);

/**
 * Whitens with the running statistics; any `samples >= 1` is accepted.
 *
 * # Safety
 * `data` and `out` must each hold `channels * samples` doubles.
 */
enum WnStatus wn_whitening_inference(const struct WnWhitening *h,
                                     const double *data,
                                     size_t channels,
                                     size_t samples,
                                     double *out);

/**
 * Copies the current batch transform `Σ^{-1/2}` (`channels × channels`).
 *
 * # Safety
 * `out` must hold `channels * channels` doubles.
 */
enum WnStatus wn_whitening_transform(const struct WnWhitening *h, double *out);

/**
 * Builds a complete GRBS plan from per-class sample counts indexed by class id.
 *
 * # Safety
 * `counts` must hold `num_classes` values; `out` must be writable.
 */
enum WnStatus wn_grbs_plan_new(const size_t *counts,
                               size_t num_classes,
                               size_t groups,
                               double r0,
                               double alpha,
                               size_t batch_size,
                               struct WnGroupPlan **out);

/**
 * # Safety
 * `h` must be NULL or a live plan handle.
 */
void wn_grbs_plan_free(struct WnGroupPlan *h);

/**
 * # Safety
 * `h` must be a live plan handle and `out` writable.
 */
enum WnStatus wn_grbs_plan_r_min(const struct WnGroupPlan *h, double *out);

/**
 * # Safety
 * `h` must be a live plan handle and `out` writable.
 */
enum WnStatus wn_grbs_plan_scale(const struct WnGroupPlan *h, double *out);

/**
 * # Safety
 * `h` must be a live plan handle and `out` writable.
 */
enum WnStatus wn_grbs_plan_num_groups(const struct WnGroupPlan *h, size_t *out);

/**
 * Per-class sampling probability within the class's group, indexed by
 * class id, and the group index of each class. `group_of` may be NULL.
 *
 * # Safety
 * `probs` (and `group_of` when non-NULL) must hold `num_classes` values.
 */
enum WnStatus wn_grbs_plan_class_probs(const struct WnGroupPlan *h,
                                       size_t num_classes,
                                       double *probs,
                                       size_t *group_of);

/**
 * Serialises the plan (groups, ratios, probabilities, `r_min`, scale) as
 * JSON. Release the result with [`wn_string_free`].
 *
 * # Safety
 * `h` must be a live plan handle and `out` writable.
 */
enum WnStatus wn_grbs_plan_to_json(const struct WnGroupPlan *h, char **out);

/**
 * Creates a batch generator over `labels` (class id per sample).
 *
 * # Safety
 * `labels` must hold `num_samples` values; `plan` must be live.
 */
enum WnStatus wn_grbs_sampler_new(const struct WnGroupPlan *plan,
                                  const size_t *labels,
                                  size_t num_samples,
                                  uint64_t seed,
                                  struct WnGrbsSampler **out);

/**
 * # Safety
 * `h` must be NULL or a live sampler handle.
 */
void wn_grbs_sampler_free(struct WnGrbsSampler *h);

/**
 * Draws the next batch. Both buffers must hold `batch_size` values;
 * `classes` may be NULL.
 *
 * # Safety
 * Buffers must be valid for `batch_size` writes.
 */
enum WnStatus wn_grbs_sampler_next(struct WnGrbsSampler *h,
                                   size_t batch_size,
                                   size_t *samples,
                                   size_t *classes);

/**
 * Pearson correlation matrix (`channels × channels`) and the mean absolute
 * off-diagonal coefficient. `rho` may be NULL.
 *
 * # Safety
 * `data` must hold `channels * samples` doubles, `rho` `channels²`.
 */
enum WnStatus wn_ppmcc(const double *data,
                       size_t channels,
                       size_t samples,
                       double *rho,
                       double *mean_abs_offdiag);

/**
 * Singular values of the centered batch, descending. `out` must hold
 * `min(channels, samples)` values.
 *
 * # Safety
 * `data` must hold `channels * samples` doubles.
 */
enum WnStatus wn_singular_spectrum(const double *data,
                                   size_t channels,
                                   size_t samples,
                                   double *out);

/**
 * Trace of a `channels × channels` covariance matrix.
 *
 * # Safety
 * `covariance` must hold `channels²` doubles.
 */
enum WnStatus wn_stability_e(const double *covariance, size_t channels, double *out);

/**
 * Runs the experiment described by a JSON config file and writes its
 * artifacts to `out_dir`. `out_dir` may be NULL to use the config's own.
 *
 * # Safety
 * Paths must be NUL-terminated UTF-8; `overall_accuracy` may be NULL.
 */
enum WnStatus wn_train_from_config(const char *config_path,
                                   const char *out_dir,
                                   double *overall_accuracy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WHITENET_H */
