#ifndef SPARSE_NLME_H
#define SPARSE_NLME_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum SnStatus {
  SN_STATUS_OK = 0,
  SN_STATUS_NULL_POINTER = 1,
  SN_STATUS_INVALID_STRING = 2,
  SN_STATUS_CONFIG = 3,
  SN_STATUS_DATA = 4,
  SN_STATUS_DIMENSION = 5,
  SN_STATUS_NOT_SPD = 6,
  SN_STATUS_PARAMETER = 7,
  SN_STATUS_BUDGET = 8,
  SN_STATUS_QUADRATURE = 9,
  SN_STATUS_NON_FINITE = 10,
  SN_STATUS_INSUFFICIENT = 11,
  SN_STATUS_IO = 12,
  SN_STATUS_PANIC = 13,
} SnStatus;

/**
 * Observations, designs and covariates of all individuals.
 */
typedef struct SnDataset SnDataset;

/**
 * Regression function `f(phi, t)`.
 */
typedef struct SnFunction SnFunction;

/**
 * A parameter pair `(beta, Gamma)`.
 */
typedef struct SnParams SnParams;

typedef struct SnDivergence {
  double kl_sum;
  double variation_sum;
  double renyi_avg;
  double dn;
  double pn;
} SnDivergence;

typedef struct SnFitOptions {
  size_t iterations;
  size_t burn_in;
  size_t thin;
  /**
   * Slab rate; a value `<= 0` selects the upper end of the admissible bracket.
   */
  double lambda;
  bool update_gamma;
  /**
   * `0` keeps the default cap `min(qp, n)`.
   */
  size_t max_support;
  uint64_t seed;
} SnFitOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *sn_last_error(void);

/**
 * Static, NUL-terminated version string.
 */
const char *sn_version(void);

/**
 * Builds a built-in regression function (`logistic`, `logistic3`, `linear`)
 * from `count` named parameters.
 *
 * # Safety
 * `name` must be a NUL-terminated string, `keys` and `values` must point to
 * `count` entries each and `out` must be writable.
 */
enum SnStatus sn_function_new(const char *name,
                              const char *const *keys,
                              const double *values,
                              size_t count,
                              struct SnFunction **out);

/**
 * # Safety
 * `f` must be null or a handle from [`sn_function_new`] not yet freed.
 */
void sn_function_free(struct SnFunction *f);

/**
 * Reads a dataset from the long-format data CSV and the covariate CSV.
 *
 * # Safety
 * Paths must be NUL-terminated strings, `f` a live function handle and `out`
 * writable.
 */
enum SnStatus sn_dataset_read(const char *data_path,
                              const char *covariates_path,
                              const struct SnFunction *f,
                              double sigma2,
                              struct SnDataset **out);

/**
 * # Safety
 * `ds` must be null or a handle from [`sn_dataset_read`] not yet freed.
 */
void sn_dataset_free(struct SnDataset *ds);

/**
 * Writes `n`, `p`, `q` and `r` of the dataset; null outputs are skipped.
 *
 * # Safety
 * `ds` must be a live dataset handle; non-null outputs must be writable.
 */
enum SnStatus sn_dataset_shape(const struct SnDataset *ds,
                               size_t *n,
                               size_t *p,
                               size_t *q,
                               size_t *r);

/**
 * Builds `(beta, Gamma)` from a 0-based support with its values and the
 * row-major lower triangle of `Gamma` (`r (r + 1) / 2` entries).
 *
 * # Safety
 * Array pointers must reference the stated number of elements and `out` must
 * be writable.
 */
enum SnStatus sn_params_new(size_t dim,
                            const size_t *support,
                            const double *values,
                            size_t size,
                            const double *gamma_lt,
                            size_t r,
                            struct SnParams **out);

/**
 * Reads a TOML parameter file (`beta0_support` 1-based, `beta0_values`,
 * `gamma0`) sized for the dataset.
 *
 * # Safety
 * `path` must be NUL-terminated, `ds` a live dataset handle and `out` writable.
 */
enum SnStatus sn_params_read(const char *path, const struct SnDataset *ds, struct SnParams **out);

/**
 * # Safety
 * `params` must be null or a live parameter handle.
 */
void sn_params_free(struct SnParams *params);

/**
 * Marginal log-likelihood of `params` on the dataset.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum SnStatus sn_loglik(const struct SnDataset *ds,
                        const struct SnFunction *f,
                        const struct SnParams *params,
                        double *out);

/**
 * Aggregate divergences between `params` and the truth `truth`.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum SnStatus sn_divergence(const struct SnDataset *ds,
                            const struct SnFunction *f,
                            const struct SnParams *params,
                            const struct SnParams *truth,
                            struct SnDivergence *out);

/**
 * Default options for [`sn_fit`].
 */
struct SnFitOptions sn_fit_options_default(void);

/**
 * Runs one sampler chain with default priors and writes the posterior
 * inclusion probability of each of the `dim = qp` coordinates.
 *
 * # Safety
 * Handles must be live, `opts` readable and `inclusion` must have room for
 * `dim` values.
 */
enum SnStatus sn_fit(const struct SnDataset *ds,
                     const struct SnFunction *f,
                     const struct SnFitOptions *opts,
                     double *inclusion,
                     size_t dim);

/**
 * Runs the command-line interface with `argc` arguments (the first is the
 * program name) and returns its exit code.
 *
 * # Safety
 * `argv` must point to `argc` NUL-terminated strings.
 */
int sn_cli_run(int argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPARSE_NLME_H */
