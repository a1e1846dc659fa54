/* Generated by cbindgen; do not edit. */

#ifndef J2R_H
#define J2R_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum J2rBasis {
  J2R_BASIS_LINEAR = 0,
  J2R_BASIS_POLYNOMIAL = 1,
  J2R_BASIS_SPLINE = 2,
} J2rBasis;

typedef enum J2rCi {
  J2R_CI_AUTO = 0,
  J2R_CI_WALD = 1,
  J2R_CI_PERCENTILE = 2,
  J2R_CI_SYMMETRIC_T = 3,
} J2rCi;

typedef enum J2rEstimator {
  J2R_ESTIMATOR_MR = 0,
  J2R_ESTIMATOR_MR_N = 1,
  J2R_ESTIMATOR_MR_C = 2,
  J2R_ESTIMATOR_PS_RP = 3,
  J2R_ESTIMATOR_PS_RP_N = 4,
  J2R_ESTIMATOR_PS_OM = 5,
  J2R_ESTIMATOR_PS_OM_N = 6,
  J2R_ESTIMATOR_RP_PM = 7,
} J2rEstimator;

typedef enum J2rMoments {
  J2R_MOMENTS_FIRST = 0,
  J2R_MOMENTS_FIRST_TWO = 1,
  J2R_MOMENTS_FIRST_TWO_INTERACTIONS = 2,
} J2rMoments;

typedef enum J2rSetting {
  J2R_SETTING_CROSS_SECTIONAL = 0,
  J2R_SETTING_LONGITUDINAL = 1,
  J2R_SETTING_DISCRETE = 2,
} J2rSetting;

typedef enum J2rStatus {
  J2R_STATUS_OK = 0,
  J2R_STATUS_NULL_POINTER = 1,
  J2R_STATUS_INVALID_ARGUMENT = 2,
  J2R_STATUS_DATA_ERROR = 3,
  J2R_STATUS_NUMERICAL_ERROR = 4,
  J2R_STATUS_IO_ERROR = 5,
  J2R_STATUS_PANIC = 6,
} J2rStatus;

/**
 * Opaque analysis result handle.
 */
typedef struct J2rAnalysis J2rAnalysis;

/**
 * Opaque dataset handle.
 */
typedef struct J2rDataset J2rDataset;

/**
 * Analysis settings. Obtain defaults from [`j2r_options_default`].
 */
typedef struct J2rOptions {
  /**
   * Bit `k` selects the estimator with `J2rEstimator` value `k`; zero means all.
   */
  uint32_t estimators;
  enum J2rCi ci;
  size_t bootstrap_reps;
  uint64_t seed;
  double level;
  enum J2rBasis basis;
  /**
   * Polynomial degree or number of interior spline knots.
   */
  size_t basis_param;
  enum J2rMoments moments;
} J2rOptions;

typedef struct J2rEstimate {
  enum J2rEstimator estimator;
  double tau;
  double se;
  double lo;
  double hi;
  size_t bootstrap_reps;
  size_t bootstrap_failures;
} J2rEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *j2r_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *j2r_version(void);

/**
 * Static label such as "mr-C" (`visits` > 1) or "tr-C" (`visits` == 1).
 */
const char *j2r_estimator_label(enum J2rEstimator estimator, size_t visits);

struct J2rOptions j2r_options_default(void);

/**
 * Reads a wide CSV. `covariates` and `outcomes` are comma-separated column
 * names; outcomes are listed in visit order. Empty cells mean missing.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum J2rStatus j2r_dataset_load_csv(const char *path,
                                    const char *treatment,
                                    const char *covariates,
                                    const char *outcomes,
                                    struct J2rDataset **out);

/**
 * Builds a dataset from row-major arrays: `covariates` is `n * p`, `outcomes`
 * is `n * t` with NaN for missing values, `treatment` holds 0 or 1.
 *
 * # Safety
 * Arrays must hold the stated number of elements; `out` must be writable.
 */
enum J2rStatus j2r_dataset_from_arrays(size_t n,
                                       size_t p,
                                       size_t t,
                                       const double *covariates,
                                       const uint8_t *treatment,
                                       const double *outcomes,
                                       struct J2rDataset **out);

/**
 * Draws a dataset from one of the built-in simulation designs.
 *
 * # Safety
 * `out` must be writable.
 */
enum J2rStatus j2r_dataset_generate(enum J2rSetting setting,
                                    size_t n,
                                    uint64_t seed,
                                    struct J2rDataset **out);

/**
 * # Safety
 * `ds` must be null or a handle from this library that has not been freed.
 */
void j2r_dataset_free(struct J2rDataset *ds);

/**
 * Number of subjects, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t j2r_dataset_n(const struct J2rDataset *ds);

/**
 * Number of post-baseline visits, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t j2r_dataset_visits(const struct J2rDataset *ds);

/**
 * Number of baseline covariates, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t j2r_dataset_covariates(const struct J2rDataset *ds);

/**
 * Fits the nuisance models and computes the selected estimators with
 * intervals. A null `options` uses the defaults.
 *
 * # Safety
 * `ds` must be a live handle; `options` null or valid; `out` writable.
 */
enum J2rStatus j2r_analyze(const struct J2rDataset *ds,
                           const struct J2rOptions *options,
                           struct J2rAnalysis **out);

/**
 * Number of estimates in an analysis, or 0 for a null handle.
 *
 * # Safety
 * `an` must be null or a live handle.
 */
size_t j2r_analysis_len(const struct J2rAnalysis *an);

/**
 * Copies estimate `index` into `out`.
 *
 * # Safety
 * `an` must be a live handle and `out` writable.
 */
enum J2rStatus j2r_analysis_get(const struct J2rAnalysis *an,
                                size_t index,
                                struct J2rEstimate *out);

/**
 * # Safety
 * `an` must be null or a handle from this library that has not been freed.
 */
void j2r_analysis_free(struct J2rAnalysis *an);

/**
 * Solves for weights `w_i = 1 + exp(lambda' h_i)` with
 * `sum_i w_i h_i = scale * target` and, if `normalize_total` is nonzero,
 * `sum_i w_i = scale`. `moments` is row-major `rows * m`; `weights` receives
 * `rows` values and `lambda`, if not null, `m` values.
 *
 * # Safety
 * Arrays must hold the stated number of elements.
 */
enum J2rStatus j2r_calibrate(size_t rows,
                             size_t m,
                             const double *moments,
                             const double *target,
                             double scale,
                             int32_t normalize_total,
                             double tol,
                             size_t max_iter,
                             double *weights,
                             double *lambda);

/**
 * True effect of a built-in design. The discrete design is enumerated
 * exactly; the continuous ones use `draws` Monte Carlo draws.
 *
 * # Safety
 * `out` must be writable.
 */
enum J2rStatus j2r_true_tau(enum J2rSetting setting, size_t draws, uint64_t seed, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* J2R_H */
