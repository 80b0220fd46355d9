/* C interface to the flowsde sampling laboratory. */

#ifndef FLOWSDE_H
#define FLOWSDE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible entry point.
 */
typedef enum FlowSdeStatus {
  /**
   * Success; out-parameters are valid.
   */
  FlowSdeStatusOk = 0,
  /**
   * A required pointer argument was null.
   */
  FlowSdeStatusNullPointer = 1,
  /**
   * An argument failed validation (bad length, unknown name, bad value).
   */
  FlowSdeStatusInvalidArgument = 2,
  /**
   * A numeric argument lay outside its mathematical domain.
   */
  FlowSdeStatusDomain = 3,
  /**
   * The output buffer length does not match what the call produces.
   */
  FlowSdeStatusBufferMismatch = 4,
  /**
   * An internal panic was caught at the boundary.
   */
  FlowSdeStatusPanic = 5,
} FlowSdeStatus;

/**
 * Opaque handle over a data model with an exact posterior oracle.
 */
typedef struct FlowSdeModel FlowSdeModel;

/**
 * Opaque handle over an exploration-noise schedule.
 */
typedef struct FlowSdeSchedule FlowSdeSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Most recent error message for this thread, as a NUL-terminated string.
 *
 * The pointer stays valid until the next failing call on the same thread.
 * Returns an empty string if no error has occurred yet.
 */
const char *flowsde_last_error(void);

/**
 * Point-mass data model at `point` (dimension `dim`).
 *
 * # Safety
 * `point` must reference `dim` readable doubles and `out` must be a valid
 * out-pointer.
 */
enum FlowSdeStatus flowsde_model_point_mass(const double *point,
                                            size_t dim,
                                            struct FlowSdeModel **out);

/**
 * Diagonal Gaussian data model with the given mean and per-axis variance.
 *
 * # Safety
 * `mean` and `variance` must reference `dim` readable doubles and `out`
 * must be a valid out-pointer.
 */
enum FlowSdeStatus flowsde_model_diagonal_gaussian(const double *mean,
                                                   const double *variance,
                                                   size_t dim,
                                                   struct FlowSdeModel **out);

/**
 * Equal-mass two-ring mixture in the plane with `points_per_ring` support
 * points on each of the two radii.
 *
 * # Safety
 * `out` must be a valid out-pointer.
 */
enum FlowSdeStatus flowsde_model_double_ring(double radius_inner,
                                             double radius_outer,
                                             size_t points_per_ring,
                                             struct FlowSdeModel **out);

/**
 * Dimension of the model's state space; 0 if `model` is null.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t flowsde_model_dim(const struct FlowSdeModel *model);

/**
 * Release a model handle. Null is accepted and ignored.
 *
 * # Safety
 * `model` must be a handle returned by a constructor, freed at most once.
 */
void flowsde_model_free(struct FlowSdeModel *model);

/**
 * Constant exploration schedule eps_t = eta (eta >= 0).
 *
 * # Safety
 * `out` must be a valid out-pointer.
 */
enum FlowSdeStatus flowsde_schedule_constant(double eta, struct FlowSdeSchedule **out);

/**
 * Log-SNR-uniform exploration schedule eps_t = eta sqrt(t / (1 - t)).
 *
 * # Safety
 * `out` must be a valid out-pointer.
 */
enum FlowSdeStatus flowsde_schedule_log_snr(double eta, struct FlowSdeSchedule **out);

/**
 * Release a schedule handle. Null is accepted and ignored.
 *
 * # Safety
 * `schedule` must be a handle returned by a constructor, freed at most once.
 */
void flowsde_schedule_free(struct FlowSdeSchedule *schedule);

/**
 * Exact posterior mean E[z0 | z_t = z] of the model at time t in (0, 1].
 *
 * `z` and `out_mean` must both have length `len` equal to the model
 * dimension.
 *
 * # Safety
 * `model` must be a live handle; `z` must reference `len` readable doubles;
 * `out_mean` must reference `len` writable doubles.
 */
enum FlowSdeStatus flowsde_posterior_mean(const struct FlowSdeModel *model,
                                          const double *z,
                                          size_t len,
                                          double t,
                                          double *out_mean);

/**
 * Run a full sampling rollout from t = 1 to t = 0 and write the final
 * states, row-major by sample, into `out` (length `n_samples * dim`).
 *
 * `rule` is one of "euler", "cps", "cps-local", "cps-euler-energy",
 * "cps-matched", "frozen-mean". Identical (seed, rule, grid) inputs yield
 * bit-identical output regardless of caller threading.
 *
 * # Safety
 * `model` and `schedule` must be live handles; `rule` must be a
 * NUL-terminated string; `out` must reference `out_len` writable doubles.
 */
enum FlowSdeStatus flowsde_rollout(const struct FlowSdeModel *model,
                                   const struct FlowSdeSchedule *schedule,
                                   const char *rule,
                                   uint32_t n_steps,
                                   size_t n_samples,
                                   uint64_t seed,
                                   double *out,
                                   size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWSDE_H */
