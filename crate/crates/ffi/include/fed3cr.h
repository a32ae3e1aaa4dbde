#ifndef FED3CR_H
#define FED3CR_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum Fed3crStatus {
  FED3CR_STATUS_OK = 0,
  FED3CR_STATUS_CONFIG_ERROR = 2,
  FED3CR_STATUS_DATA_ERROR = 3,
  FED3CR_STATUS_RUNTIME_ERROR = 4,
  FED3CR_STATUS_NULL_ARGUMENT = 5,
  FED3CR_STATUS_INVALID_UTF8 = 6,
  FED3CR_STATUS_PANIC = 7,
} Fed3crStatus;

/**
 * Experiment configuration handle.
 */
typedef struct Fed3crConfig Fed3crConfig;

/**
 * Interaction dataset handle.
 */
typedef struct Fed3crDataset Fed3crDataset;

typedef struct Fed3crStats {
  size_t clients;
  size_t items;
  size_t interactions;
  double avg;
  double sparsity;
} Fed3crStats;

/**
 * Final and best ranking quality of a run. Missing values are NaN.
 */
typedef struct Fed3crSummary {
  size_t rounds;
  double final_hr;
  double final_ndcg;
  double best_hr;
  size_t best_hr_round;
  double best_ndcg;
  size_t best_ndcg_round;
} Fed3crSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the next
 * failing call on the same thread.
 */
const char *fed3cr_last_error(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void fed3cr_string_free(char *s);

/**
 * Truncated rank-biased overlap of two duplicate-free lists of equal length.
 *
 * # Safety
 * `a` and `b` must point to `len` readable ids; `out` must be writable.
 */
enum Fed3crStatus fed3cr_rbo(const size_t *a, const size_t *b, size_t len, double p, double *out);

/**
 * HR@k and NDCG@k of `test_item` within a ranked candidate list.
 *
 * # Safety
 * `ranked` must point to `len` readable ids; the outputs must be writable.
 */
enum Fed3crStatus fed3cr_hr_ndcg(const size_t *ranked,
                                 size_t len,
                                 size_t test_item,
                                 size_t k,
                                 double *out_hr,
                                 double *out_ndcg);

/**
 * Checks the consensus distance bound for quadratic clients.
 *
 * `optima` holds `clients` row-major vectors of length `dim`. Per-client
 * distances and bounds are written to `out_distances` / `out_bounds` (each
 * `clients` long) and the number of violated clients to `out_violations`.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum Fed3crStatus fed3cr_verify_bound(const double *optima,
                                      size_t clients,
                                      size_t dim,
                                      double *out_distances,
                                      double *out_bounds,
                                      size_t *out_violations);

/**
 * Loads an interaction file. `format` is `movielens-dat`, `csv` or `tsv`.
 *
 * # Safety
 * `path` and `format` must be NUL-terminated strings; `out` must be writable.
 */
enum Fed3crStatus fed3cr_dataset_load(const char *path,
                                      const char *format,
                                      size_t min_interactions,
                                      struct Fed3crDataset **out);

/**
 * Generates the planted-block synthetic dataset.
 *
 * # Safety
 * `out` must be writable.
 */
enum Fed3crStatus fed3cr_dataset_toy(size_t clients,
                                     size_t items,
                                     size_t blocks,
                                     size_t positives,
                                     size_t noise,
                                     uint64_t seed,
                                     struct Fed3crDataset **out);

/**
 * # Safety
 * `ds` must be a live dataset handle; `out` must be writable.
 */
enum Fed3crStatus fed3cr_dataset_stats(const struct Fed3crDataset *ds, struct Fed3crStats *out);

/**
 * # Safety
 * `ds` must be NULL or a handle from this library that was not freed yet.
 */
void fed3cr_dataset_free(struct Fed3crDataset *ds);

/**
 * Default configuration (bundled toy data).
 *
 * # Safety
 * `out` must be writable.
 */
enum Fed3crStatus fed3cr_config_new(struct Fed3crConfig **out);

/**
 * Reads a TOML config or a run manifest (`.json`).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum Fed3crStatus fed3cr_config_load(const char *path, struct Fed3crConfig **out);

/**
 * Sets one dotted key, e.g. `training.lr` to `0.05`. The handle is left
 * unchanged on failure.
 *
 * # Safety
 * `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum Fed3crStatus fed3cr_config_set(struct Fed3crConfig *cfg, const char *key, const char *value);

/**
 * # Safety
 * `cfg` must be NULL or a handle from this library that was not freed yet.
 */
void fed3cr_config_free(struct Fed3crConfig *cfg);

/**
 * Full run writing its outputs under the configured output directory.
 * `workers = 0` uses the default thread pool.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be NULL or writable.
 */
enum Fed3crStatus fed3cr_run(const struct Fed3crConfig *cfg,
                             size_t workers_n,
                             bool force,
                             struct Fed3crSummary *out);

/**
 * Trains in memory and returns the metrics CSV as a newly allocated string
 * (release with [`fed3cr_string_free`]). Nothing is written to disk.
 *
 * # Safety
 * `cfg` must be a live handle; `out_csv` must be writable.
 */
enum Fed3crStatus fed3cr_train_metrics(const struct Fed3crConfig *cfg,
                                       size_t workers_n,
                                       char **out_csv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FED3CR_H */
