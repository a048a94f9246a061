#ifndef GCDYN_H
#define GCDYN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes of the C interface.
typedef enum GcdynStatus {
  GCDYN_STATUS_OK = 0,
  GCDYN_STATUS_NULL_POINTER = 1,
  GCDYN_STATUS_INVALID_ARGUMENT = 2,
  GCDYN_STATUS_CONFIG = 3,
  GCDYN_STATUS_NUMERICAL = 4,
  GCDYN_STATUS_NOT_CONVERGED = 5,
  GCDYN_STATUS_IO = 6,
  GCDYN_STATUS_BUFFER_TOO_SMALL = 7,
  GCDYN_STATUS_PANIC = 8,
} GcdynStatus;

// Parsed and validated experiment configuration.
typedef struct GcdynConfig GcdynConfig;

// DMF solution of the first point of a configuration.
typedef struct GcdynDmf GcdynDmf;

// Aggregated rows of an experiment run.
typedef struct GcdynResult GcdynResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread; empty if none. The pointer
// stays valid until the next failing call on this thread.
const char *gcdyn_last_error(void);

// Parse a TOML configuration. Missing keys take their defaults.
//
// # Safety
// `toml` must be a NUL-terminated string and `out` a valid pointer.
enum GcdynStatus gcdyn_config_new(const char *toml, struct GcdynConfig **out);

// Apply one `section.key=value` override and re-validate. On failure the
// configuration is unchanged.
//
// # Safety
// `cfg` must come from [`gcdyn_config_new`]; `assignment` must be NUL-terminated.
enum GcdynStatus gcdyn_config_set(struct GcdynConfig *cfg, const char *assignment);

// Write the 64-character config hash and a NUL into `buf` (at least 65 bytes).
//
// # Safety
// `cfg` must be a live handle and `buf` writable for `len` bytes.
enum GcdynStatus gcdyn_config_hash(const struct GcdynConfig *cfg, char *buf, size_t len);

// # Safety
// `cfg` must come from [`gcdyn_config_new`] or be null.
void gcdyn_config_free(struct GcdynConfig *cfg);

// Solve the DMF equations at the first point of `cfg`.
//
// # Safety
// `cfg` must be a live handle and `out` a valid pointer.
enum GcdynStatus gcdyn_dmf_solve(const struct GcdynConfig *cfg, struct GcdynDmf **out);

// Number of iterates L of the solution, or 0 for a null handle.
//
// # Safety
// `dmf` must be a live handle or null.
size_t gcdyn_dmf_steps(const struct GcdynDmf *dmf);

// Final relative residual of the fixed-point iteration (NaN for null).
//
// # Safety
// `dmf` must be a live handle or null.
double gcdyn_dmf_residual(const struct GcdynDmf *dmf);

// Mean metric curve ("loss" or "zero_one") of the solution and its Monte
// Carlo standard error, from `paths` characteristic paths. `mean` and
// `stderr` must hold `len` = L values; `stderr` may be null.
//
// # Safety
// `dmf` must be a live handle, `metric` NUL-terminated, and the arrays
// writable for `len` doubles.
enum GcdynStatus gcdyn_dmf_metric_curve(const struct GcdynDmf *dmf,
                                        const char *metric,
                                        size_t paths,
                                        uint64_t seed,
                                        double *mean,
                                        double *stderr,
                                        size_t len);

// # Safety
// `dmf` must come from [`gcdyn_dmf_solve`] or be null.
void gcdyn_dmf_free(struct GcdynDmf *dmf);

// Run every configured method over the sweep with `threads` workers (0 for
// all cores). The output does not depend on `threads`.
//
// # Safety
// `cfg` must be a live handle and `out` a valid pointer.
enum GcdynStatus gcdyn_experiment_run(const struct GcdynConfig *cfg,
                                      size_t threads,
                                      struct GcdynResult **out);

// Number of data rows in the result (0 for null).
//
// # Safety
// `res` must be a live handle or null.
size_t gcdyn_result_rows(const struct GcdynResult *res);

// The result as CSV text, owned by the handle.
//
// # Safety
// `res` must be a live handle or null; the pointer dies with the handle.
const char *gcdyn_result_csv(const struct GcdynResult *res);

// # Safety
// `res` must come from [`gcdyn_experiment_run`] or be null.
void gcdyn_result_free(struct GcdynResult *res);

// Momentum coefficients: λ into `lambda` (`steps` values) and Λ into
// `big_lambda` (`steps`² values, column-major, Λ(μ, l) at μ + l·steps).
//
// # Safety
// The arrays must be writable for the stated sizes.
enum GcdynStatus gcdyn_momentum_coefficients(double t,
                                             double s,
                                             size_t steps,
                                             double *lambda,
                                             double *big_lambda);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GCDYN_H */
