/* C ABI for the iondet trapped-ion readout toolkit. */

#ifndef IONDET_H
#define IONDET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by fallible functions.
 */
typedef enum IondetStatus {
  IONDET_STATUS_OK = 0,
  /**
   * An argument was out of range or inconsistent.
   */
  IONDET_STATUS_INVALID_ARGUMENT = 1,
  /**
   * A fit or simulation failed at runtime.
   */
  IONDET_STATUS_RUNTIME_ERROR = 2,
  /**
   * A required pointer was null.
   */
  IONDET_STATUS_NULL_POINTER = 3,
} IondetStatus;

/**
 * How a classification stopped.
 */
typedef enum IondetStopReason {
  IONDET_STOP_REASON_THRESHOLD_REACHED = 0,
  IONDET_STOP_REASON_MAX_BINS = 1,
  IONDET_STOP_REASON_FIXED_WINDOW = 2,
} IondetStopReason;

/**
 * Opaque rate model handle.
 */
typedef struct IondetRateModel IondetRateModel;

/**
 * Opaque fidelity report handle.
 */
typedef struct IondetReport IondetReport;

/**
 * A discriminator verdict with its evidence.
 */
typedef struct IondetOutcome {
  /**
   * 1 = bright, 0 = dark.
   */
  int32_t bright;
  double posterior_bright;
  size_t bins_used;
  double log_likelihood_bright;
  double log_likelihood_dark;
  enum IondetStopReason stop_reason;
} IondetOutcome;

/**
 * One row of the error-versus-time scan.
 */
typedef struct IondetScanRow {
  size_t bins;
  double detect_time_s;
  double eps_bright;
  double eps_dark;
  double mean_error;
} IondetScanRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message for this thread, or null when no error occurred.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *iondet_last_error(void);

/**
 * Library version as a static string.
 */
const char *iondet_version(void);

/**
 * Create a rate model. Returns null on invalid parameters.
 */
struct IondetRateModel *iondet_rate_model_new(double bright_rate_cps,
                                              double dark_rate_cps,
                                              double bin_width_s,
                                              double decay_rate_hz,
                                              double dispersion);

/**
 * Load a named built-in preset (e.g. "paper-passive", "paper-no-stray",
 * "projected-active-quench", "pmt-paper"). Returns null if unknown.
 */
struct IondetRateModel *iondet_rate_model_preset(const char *name);

/**
 * Destroy a rate model handle (null is a no-op).
 */
void iondet_rate_model_free(struct IondetRateModel *model);

/**
 * Fixed-threshold classification of a binned count record.
 */
enum IondetStatus iondet_classify_threshold(const struct IondetRateModel *model,
                                            const uint32_t *counts,
                                            size_t n_bins,
                                            double threshold,
                                            double prior_bright,
                                            struct IondetOutcome *out);

/**
 * Decay-aware maximum-likelihood classification.
 */
enum IondetStatus iondet_classify_mle(const struct IondetRateModel *model,
                                      const uint32_t *counts,
                                      size_t n_bins,
                                      double prior_bright,
                                      struct IondetOutcome *out);

/**
 * Adaptive Bayesian classification: consumes bins from the front of
 * `counts` until the confidence threshold or `max_bins` is reached.
 */
enum IondetStatus iondet_classify_adaptive(const struct IondetRateModel *model,
                                           const uint32_t *counts,
                                           size_t n_bins,
                                           double confidence,
                                           size_t max_bins,
                                           double prior_bright,
                                           struct IondetOutcome *out);

/**
 * Per-bin count probability P(K = k). `kind` 0 = Poisson,
 * 1 = negative binomial with the given dispersion.
 */
enum IondetStatus iondet_pmf(int32_t kind, double mean, double dispersion, uint64_t k, double *out);

/**
 * Non-paralyzable dead-time saturation R/(1 + R τ).
 */
double iondet_observed_rate(double true_rate_cps, double dead_time_s);

/**
 * Run a single-detector experiment with the decay-aware MLE on every
 * prefix of the window. Returns a report handle, or null on error.
 */
struct IondetReport *iondet_run_mle_experiment(const struct IondetRateModel *model,
                                               double window_s,
                                               uint64_t n_trials,
                                               uint64_t master_seed,
                                               double prep_bright_probability,
                                               size_t scan_stride);

/**
 * Number of scan rows in a report.
 */
size_t iondet_report_len(const struct IondetReport *report);

/**
 * Fetch one scan row (method 0 of the configured scan).
 */
enum IondetStatus iondet_report_row(const struct IondetReport *report,
                                    size_t index,
                                    struct IondetScanRow *out);

/**
 * Destroy a report handle (null is a no-op).
 */
void iondet_report_free(struct IondetReport *report);

/**
 * Monte Carlo collection efficiency of the fabricated stack at a
 * lateral ion offset (fraction of 4π). Returns a negative value on
 * error.
 */
double iondet_collection_efficiency(double lateral_offset_m, uint64_t n_rays, uint64_t master_seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IONDET_H */
