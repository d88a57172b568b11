#ifndef IAVAE_H
#define IAVAE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IavaeMode {
  IAVAE_MODE_VAE = 0,
  IAVAE_MODE_IA_VAE = 1,
} IavaeMode;

/*
 Result code of every fallible call.
 */
typedef enum IavaeStatus {
  IAVAE_STATUS_OK = 0,
  IAVAE_STATUS_NULL_POINTER = 1,
  IAVAE_STATUS_INVALID_ARGUMENT = 2,
  IAVAE_STATUS_SHAPE_MISMATCH = 3,
  IAVAE_STATUS_NOT_POSITIVE_DEFINITE = 4,
  IAVAE_STATUS_DEGENERATE = 5,
  IAVAE_STATUS_IO = 6,
  IAVAE_STATUS_NUMERICAL = 7,
  IAVAE_STATUS_PANIC = 8,
} IavaeStatus;

/*
 Test chosen by the significance pipeline.
 */
typedef enum IavaeTest {
  IAVAE_TEST_PAIRED_T = 0,
  IAVAE_TEST_WILCOXON = 1,
} IavaeTest;

/*
 Opaque synthetic dataset.
 */
typedef struct IavaeDataset IavaeDataset;

/*
 Opaque inference model (plain VAE encoder or IA-VAE).
 */
typedef struct IavaeModel IavaeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. The pointer
 stays valid until the next failing call on the same thread.
 */
const char *iavae_last_error_message(void);

/*
 Draws `n` observations from the oracle model.

 # Safety
 `out` must be a valid pointer to writable storage for one handle.
 */
enum IavaeStatus iavae_dataset_generate(size_t n,
                                        double sigma,
                                        uint64_t seed,
                                        struct IavaeDataset **out);

/*
 Reads a dataset written as CSV with its JSON sidecar.

 # Safety
 `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum IavaeStatus iavae_dataset_load(const char *path, struct IavaeDataset **out);

/*
 Number of observations; 0 for a NULL handle.

 # Safety
 `ds` must be NULL or a live dataset handle.
 */
size_t iavae_dataset_len(const struct IavaeDataset *ds);

/*
 Copies the observations row-major into `out` (`3 * len` values).

 # Safety
 `ds` must be a live handle and `out` must hold `out_len` doubles.
 */
enum IavaeStatus iavae_dataset_copy_x(const struct IavaeDataset *ds, double *out, size_t out_len);

/*
 Copies the generating latents row-major into `out` (`2 * len` values).

 # Safety
 `ds` must be a live handle and `out` must hold `out_len` doubles.
 */
enum IavaeStatus iavae_dataset_copy_z(const struct IavaeDataset *ds, double *out, size_t out_len);

/*
 # Safety
 `ds` must be NULL or a handle not yet freed.
 */
void iavae_dataset_free(struct IavaeDataset *ds);

/*
 Freshly initialized reference encoder as a VAE model.

 # Safety
 `out` must be a valid handle slot.
 */
enum IavaeStatus iavae_encoder_new(size_t hidden_width, uint64_t seed, struct IavaeModel **out);

/*
 IA-VAE over the encoder of `base` whose hypernetwork head is exactly
 zero, so it reproduces `base` bit for bit.

 # Safety
 `base` must be a live model handle; `out` a valid handle slot.
 */
enum IavaeStatus iavae_model_zero_modulation(const struct IavaeModel *base,
                                             uint64_t seed,
                                             struct IavaeModel **out);

/*
 Trains a model with the given JSON training configuration (NULL for
 defaults). IA-VAE mode requires `base`, whose encoder is frozen; VAE
 mode starts from `base` when given.

 # Safety
 `ds` must be live; `base` NULL or live; `config_json` NULL or a
 NUL-terminated string; `out` a valid handle slot.
 */
enum IavaeStatus iavae_train(const struct IavaeDataset *ds,
                             enum IavaeMode mode,
                             const struct IavaeModel *base,
                             const char *config_json,
                             struct IavaeModel **out);

/*
 Loads a model checkpoint written by the command-line tool.

 # Safety
 `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum IavaeStatus iavae_model_load(const char *path, struct IavaeModel **out);

/*
 # Safety
 `model` must be live; `path` a NUL-terminated string.
 */
enum IavaeStatus iavae_model_save(const struct IavaeModel *model, const char *path, uint64_t seed);

/*
 Inference parameters (encoder plus hypernetwork); 0 for NULL.

 # Safety
 `model` must be NULL or live.
 */
size_t iavae_model_parameter_count(const struct IavaeModel *model);

/*
 Posterior mean and log-variance (2 values each) for one observation.

 # Safety
 `model` must be live; `x` holds 3 doubles; outputs hold 2 each.
 */
enum IavaeStatus iavae_model_posterior(const struct IavaeModel *model,
                                       const double *x,
                                       double *mean_out,
                                       double *log_var_out);

/*
 Dataset-mean ELBO (nats, likelihood constant included) with
 `num_samples` fixed draws per point from `noise_seed`.

 # Safety
 Handles must be live; `out` must be writable.
 */
enum IavaeStatus iavae_model_elbo(const struct IavaeModel *model,
                                  const struct IavaeDataset *ds,
                                  size_t num_samples,
                                  uint64_t noise_seed,
                                  double *out);

/*
 # Safety
 `model` must be NULL or a handle not yet freed.
 */
void iavae_model_free(struct IavaeModel *model);

/*
 Mean of the oracle decoder at `z` (2 values in, 3 out).

 # Safety
 `z` holds 2 doubles, `out` 3.
 */
enum IavaeStatus iavae_decoder_true(const double *z, double *out);

/*
 `KL(N(mean, diag exp(log_var)) || N(0, I))` for `dim`-dimensional inputs.

 # Safety
 `mean` and `log_var` hold `dim` doubles; `out` is writable.
 */
enum IavaeStatus iavae_kl_diag_gaussian(const double *mean,
                                        const double *log_var,
                                        size_t dim,
                                        double *out);

/*
 Unnormalized log-posterior of the oracle model at `z` for `x`.

 # Safety
 `z` holds 2 doubles, `x` 3; `out` is writable.
 */
enum IavaeStatus iavae_log_posterior(const double *z, const double *x, double sigma, double *out);

/*
 Multi-start MAP search. `converged_out` receives 1 when the gradient
 norm at the returned point is below 1e-5, else 0.

 # Safety
 `x` holds 3 doubles, `z_out` 2; `converged_out` is writable.
 */
enum IavaeStatus iavae_find_map(const double *x,
                                double sigma,
                                size_t restarts,
                                uint64_t seed,
                                double *z_out,
                                int *converged_out);

/*
 Laplace covariance at `z_map`, written row-major (4 values).

 # Safety
 `x` holds 3 doubles, `z_map` 2, `cov_out` 4.
 */
enum IavaeStatus iavae_laplace_fit(const double *x,
                                   double sigma,
                                   const double *z_map,
                                   double *cov_out);

/*
 Mahalanobis distance of `mu` from `z_map` under the row-major 2×2
 covariance `cov`.

 # Safety
 `mu` and `z_map` hold 2 doubles, `cov` 4; `out` is writable.
 */
enum IavaeStatus iavae_mahalanobis(const double *mu,
                                   const double *z_map,
                                   const double *cov,
                                   double *out);

/*
 `p(mu | x) / p(z_map | x)` under the oracle model.

 # Safety
 `mu` and `z_map` hold 2 doubles, `x` 3; `out` is writable.
 */
enum IavaeStatus iavae_density_ratio(const double *mu,
                                     const double *x,
                                     double sigma,
                                     const double *z_map,
                                     double *out);

/*
 Gated paired test of `treatment > baseline` (Shapiro–Wilk at `alpha`
 selecting the t-test or Wilcoxon). Writes the one-sided p-value and the
 test used.

 # Safety
 `baseline` and `treatment` hold `n` doubles; outputs are writable.
 */
enum IavaeStatus iavae_significance(const double *baseline,
                                    const double *treatment,
                                    size_t n,
                                    double alpha,
                                    double *p_out,
                                    enum IavaeTest *test_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IAVAE_H */
