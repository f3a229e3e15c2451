/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef MLCA_H
#define MLCA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum MlcaStatus {
  MLCA_STATUS_OK = 0,
  // A required pointer argument was NULL.
  MLCA_STATUS_NULL_POINTER = 1,
  // Bad sizes, values, or a model that cannot be fitted to the data.
  MLCA_STATUS_INVALID_INPUT = 2,
  // The estimation failed numerically (singular information, empty class, ...).
  MLCA_STATUS_NUMERICAL = 3,
  // An internal panic was caught at the boundary.
  MLCA_STATUS_PANIC = 4,
} MlcaStatus;

typedef enum MlcaMethod {
  MLCA_METHOD_TWO_STEP = 0,
  MLCA_METHOD_ONE_STEP = 1,
  MLCA_METHOD_TWO_STAGE = 2,
} MlcaMethod;

// Responses, groups and covariates, stored sorted by group.
typedef struct MlcaDataset MlcaDataset;

// A fitted model together with the row order of the dataset it came from.
typedef struct MlcaFit MlcaFit;

// EM settings; obtain defaults from `mlca_options_default`.
typedef struct MlcaOptions {
  size_t max_iter;
  double tol;
  // Random starts in addition to the hierarchical start.
  size_t n_starts;
  uint64_t seed;
  // Evaluate groups on the global thread pool.
  bool parallel;
} MlcaOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *mlca_version(void);

// Message for the last call on this thread that did not return `MLCA_STATUS_OK`;
// empty after a successful call. Valid until the next call on the same thread.
const char *mlca_last_error(void);

struct MlcaOptions mlca_options_default(void);

// Builds a dataset from row-major arrays: `y` is `n_units x n_items` with 0/1
// entries, `groups` holds one integer id per row, and `z` is
// `n_units x n_covariates` without the intercept (NULL when `n_covariates` is 0).
//
// # Safety
// Every non-NULL pointer must reference at least the number of elements given
// by the sizes; `out` must be writable.
enum MlcaStatus mlca_dataset_new(const uint8_t *y,
                                 const int64_t *groups,
                                 const double *z,
                                 size_t n_units,
                                 size_t n_items,
                                 size_t n_covariates,
                                 struct MlcaDataset **out);

// # Safety
// `data` must be NULL or a handle from `mlca_dataset_new` not yet freed.
void mlca_dataset_free(struct MlcaDataset *data);

// Number of distinct groups; 0 for NULL.
//
// # Safety
// `data` must be NULL or a live dataset handle.
size_t mlca_dataset_n_groups(const struct MlcaDataset *data);

// Fits `n_low` low-level and `n_high` high-level classes with one of the
// `MLCA_METHOD_*` values. `options` may be NULL for the defaults.
//
// # Safety
// `data` must be a live dataset handle, `options` NULL or readable, and `out` writable.
enum MlcaStatus mlca_fit(const struct MlcaDataset *data,
                         size_t n_low,
                         size_t n_high,
                         uint32_t method,
                         const struct MlcaOptions *options,
                         struct MlcaFit **out);

// # Safety
// `fit` must be NULL or a handle from `mlca_fit` not yet freed.
void mlca_fit_free(struct MlcaFit *fit);

// Log-likelihood of the final estimates; NaN for NULL.
//
// # Safety
// `fit` must be NULL or a live fit handle.
double mlca_fit_loglik(const struct MlcaFit *fit);

// # Safety
// `fit` must be NULL or a live fit handle.
bool mlca_fit_converged(const struct MlcaFit *fit);

// EM iterations summed over all phases.
//
// # Safety
// `fit` must be NULL or a live fit handle.
size_t mlca_fit_iterations(const struct MlcaFit *fit);

// Length of the structural parameter vector: the `M - 1` log-odds of the
// high-level shares, then the logit coefficients ordered by high-level class,
// low-level class `2..T`, and design column (intercept first).
//
// # Safety
// `fit` must be NULL or a live fit handle.
size_t mlca_fit_n_structural(const struct MlcaFit *fit);

// Copies structural estimates and their standard errors; `se` may be NULL.
//
// # Safety
// `estimates` (and `se` when given) must hold `len` writable doubles.
enum MlcaStatus mlca_fit_structural(const struct MlcaFit *fit,
                                    double *estimates,
                                    double *se,
                                    size_t len);

// `P(item h = 1 | low-level class t)` as an `n_items x n_low` row-major array.
//
// # Safety
// `out` must hold `len` writable doubles.
enum MlcaStatus mlca_fit_item_probabilities(const struct MlcaFit *fit, double *out, size_t len);

// Low-level posterior class probabilities, `n_units x n_low` row-major, rows in
// the order they were passed to `mlca_dataset_new`.
//
// # Safety
// `out` must hold `len` writable doubles.
enum MlcaStatus mlca_fit_low_posteriors(const struct MlcaFit *fit, double *out, size_t len);

// High-level posterior class probabilities, `n_groups x n_high` row-major,
// groups in increasing id order.
//
// # Safety
// `out` must hold `len` writable doubles.
enum MlcaStatus mlca_fit_high_posteriors(const struct MlcaFit *fit, double *out, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MLCA_H */
