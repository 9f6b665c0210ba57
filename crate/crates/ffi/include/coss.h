#ifndef COSS_H
#define COSS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call. Zero is success.
 */
typedef enum CossStatus {
  COSS_STATUS_OK = 0,
  COSS_STATUS_NULL_POINTER = 1,
  COSS_STATUS_INVALID_UTF8 = 2,
  COSS_STATUS_EMPTY_INPUT = 3,
  COSS_STATUS_DUPLICATE_ID = 4,
  COSS_STATUS_NON_FINITE = 5,
  COSS_STATUS_MISSING_VALUE = 6,
  COSS_STATUS_EMPTY_ARM = 7,
  COSS_STATUS_DEGENERATE = 8,
  COSS_STATUS_TOO_FEW = 9,
  COSS_STATUS_ZERO_VARIANCE = 10,
  COSS_STATUS_NOT_PAIRED = 11,
  COSS_STATUS_INVALID_ARGUMENT = 12,
  COSS_STATUS_OUT_OF_RANGE = 13,
  COSS_STATUS_NOT_FOUND = 14,
  COSS_STATUS_PANIC = 99,
} CossStatus;

typedef enum CossStrategy {
  COSS_STRATEGY_COSS = 0,
  COSS_STRATEGY_RCT = 1,
} CossStrategy;

typedef enum CossParity {
  COSS_PARITY_TREATMENT_FIRST = 0,
  COSS_PARITY_CONTROL_FIRST = 1,
} CossParity;

typedef enum CossArm {
  COSS_ARM_TREATMENT = 0,
  COSS_ARM_CONTROL = 1,
} CossArm;

typedef enum CossRateFamily {
  COSS_RATE_FAMILY_UNIFORM = 0,
  COSS_RATE_FAMILY_NORMAL = 1,
  COSS_RATE_FAMILY_SHIFTED_POISSON = 2,
} CossRateFamily;

/**
 * An allocation plan. Ids are kept as C strings owned by the plan.
 */
typedef struct CossPlan CossPlan;

/**
 * Units waiting to be allocated.
 */
typedef struct CossUnits CossUnits;

typedef struct CossEstimate {
  double delta;
  double se;
  size_t n_treat;
  size_t n_control;
} CossEstimate;

typedef struct CossTest {
  double statistic;
  double p_value;
  /**
   * Degrees of freedom.
   */
  double df;
} CossTest;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *coss_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *coss_version(void);

struct CossUnits *coss_units_new(void);

/**
 * # Safety
 * `units` must come from [`coss_units_new`] and `id` must be a
 * NUL-terminated string.
 */
enum CossStatus coss_units_push(struct CossUnits *units, const char *id, double covariate);

/**
 * # Safety
 * `units` must be null or come from [`coss_units_new`].
 */
size_t coss_units_len(const struct CossUnits *units);

/**
 * # Safety
 * `units` must be null or come from [`coss_units_new`], and not be used
 * afterwards.
 */
void coss_units_free(struct CossUnits *units);

/**
 * Allocates the collected units. On success `*out` receives a plan to be
 * released with [`coss_plan_free`].
 *
 * # Safety
 * `units` must come from [`coss_units_new`]; `out` must be writable.
 */
enum CossStatus coss_allocate(const struct CossUnits *units,
                              enum CossStrategy strategy,
                              uint64_t seed,
                              enum CossParity parity,
                              struct CossPlan **out);

/**
 * Number of assignments; they are listed in rank order for COSS plans and
 * id order for RCT plans.
 *
 * # Safety
 * `plan` must be null or come from [`coss_allocate`].
 */
size_t coss_plan_len(const struct CossPlan *plan);

/**
 * Units in `arm`.
 *
 * # Safety
 * `plan` must be null or come from [`coss_allocate`].
 */
size_t coss_plan_count(const struct CossPlan *plan, enum CossArm arm);

/**
 * Id of assignment `index`, owned by the plan, or null when out of range.
 *
 * # Safety
 * `plan` must be null or come from [`coss_allocate`].
 */
const char *coss_plan_id_at(const struct CossPlan *plan, size_t index);

/**
 * Arm and pair index of assignment `index`. `*pair_index` is -1 for
 * unpaired units; `pair_index` may be null.
 *
 * # Safety
 * `plan` must come from [`coss_allocate`]; `arm` must be writable.
 */
enum CossStatus coss_plan_get(const struct CossPlan *plan,
                              size_t index,
                              enum CossArm *arm,
                              int64_t *pair_index);

/**
 * Arm of the unit with id `id`.
 *
 * # Safety
 * `plan` must come from [`coss_allocate`], `id` must be a NUL-terminated
 * string and `arm` writable.
 */
enum CossStatus coss_plan_arm_of(const struct CossPlan *plan, const char *id, enum CossArm *arm);

/**
 * # Safety
 * `plan` must be null or come from [`coss_allocate`], and not be used
 * afterwards.
 */
void coss_plan_free(struct CossPlan *plan);

/**
 * Difference in arm means with Welch standard error.
 *
 * # Safety
 * `treat` and `control` must point to `n_treat` and `n_control` doubles;
 * `out` must be writable.
 */
enum CossStatus coss_diff_means(const double *treat,
                                size_t n_treat,
                                const double *control,
                                size_t n_control,
                                struct CossEstimate *out);

/**
 * Welch two-sample t-test.
 *
 * # Safety
 * As [`coss_diff_means`], with `out` a writable [`CossTest`].
 */
enum CossStatus coss_t_test_independent(const double *treat,
                                        size_t n_treat,
                                        const double *control,
                                        size_t n_control,
                                        struct CossTest *out);

/**
 * Paired t-test over `n` (treat[i], control[i]) pairs.
 *
 * # Safety
 * `treat` and `control` must each point to `n` doubles; `out` must be
 * writable.
 */
enum CossStatus coss_t_test_paired(const double *treat,
                                   const double *control,
                                   size_t n,
                                   struct CossTest *out);

/**
 * Closed-form bias decay rate for `n >= 3` pairs.
 *
 * # Safety
 * `out` must be writable.
 */
enum CossStatus coss_bias_rate(enum CossRateFamily family, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COSS_H */
