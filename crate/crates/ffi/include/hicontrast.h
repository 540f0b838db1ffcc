#ifndef HICONTRAST_H
#define HICONTRAST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes of every fallible call.
typedef enum HcStatus {
  HC_STATUS_OK = 0,
  HC_STATUS_NULL_POINTER = 1,
  HC_STATUS_INVALID_ARGUMENT = 2,
  HC_STATUS_INVALID_CONFIG = 3,
  HC_STATUS_INVALID_GEOMETRY = 4,
  HC_STATUS_SOLVER_FAILED = 5,
  HC_STATUS_OUT_OF_RANGE = 6,
  HC_STATUS_IO = 7,
  HC_STATUS_PANIC = 8,
} HcStatus;

// Band structure of the limit operator.
typedef struct HcBandSet HcBandSet;

// Result of the epsilon sweep.
typedef struct HcConvergence HcConvergence;

// Prepared environment, effective matrix and mode bases.
typedef struct HcSetup HcSetup;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *hc_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *hc_version(void);

// Parses a TOML configuration and runs the shared setup.
//
// # Safety
// `toml` must be a NUL-terminated string and `out` valid for writes.
enum HcStatus hc_setup_new(const char *toml, struct HcSetup **out);

// # Safety
// `setup` must be null or a handle from [`hc_setup_new`] not yet freed.
void hc_setup_free(struct HcSetup *setup);

// Writes the effective matrix row-major into `out[4]`.
//
// # Safety
// `setup` must be a live handle and `out` valid for four doubles.
enum HcStatus hc_setup_theta(const struct HcSetup *setup, double *out);

// Matrix volume fraction and number of inclusion types.
//
// # Safety
// `setup` must be a live handle; `alpha0` and `types` valid for writes.
enum HcStatus hc_setup_fractions(const struct HcSetup *setup, double *alpha0, size_t *types);

// Writes the configuration hash as a NUL-terminated string into `buf`.
//
// # Safety
// `setup` must be a live handle and `buf` valid for `len` bytes.
enum HcStatus hc_setup_config_hash(const struct HcSetup *setup, char *buf, size_t len);

// Evaluates the dispersion function `W(lambda)` of the setup.
//
// # Safety
// `setup` must be a live handle and `out` valid for writes.
enum HcStatus hc_dispersion_eval(const struct HcSetup *setup, double lambda, double *out);

// Computes the band structure (and the fine diagnostic if configured).
//
// # Safety
// `setup` must be a live handle and `out` valid for writes.
enum HcStatus hc_spectrum_compute(const struct HcSetup *setup, struct HcBandSet **out);

// # Safety
// `bands` must be null or a handle from [`hc_spectrum_compute`].
void hc_bandset_free(struct HcBandSet *bands);

// Number of continuous bands.
//
// # Safety
// `bands` must be a live handle and `out` valid for writes.
enum HcStatus hc_bandset_band_count(const struct HcBandSet *bands, size_t *out);

// Endpoints of band `index`.
//
// # Safety
// `bands` must be a live handle; `start` and `end` valid for writes.
enum HcStatus hc_bandset_band(const struct HcBandSet *bands,
                              size_t index,
                              double *start,
                              double *end);

// Number of point eigenvalues of infinite multiplicity.
//
// # Safety
// `bands` must be a live handle and `out` valid for writes.
enum HcStatus hc_bandset_point_count(const struct HcBandSet *bands, size_t *out);

// Point eigenvalue `index`.
//
// # Safety
// `bands` must be a live handle and `out` valid for writes.
enum HcStatus hc_bandset_point(const struct HcBandSet *bands, size_t index, double *out);

// Largest retained pole; infinite when the catalog is empty.
//
// # Safety
// `bands` must be a live handle and `out` valid for writes.
enum HcStatus hc_bandset_truncation_cap(const struct HcBandSet *bands, double *out);

// Runs the epsilon sweep of the configuration.
//
// # Safety
// `setup` must be a live handle and `out` valid for writes.
enum HcStatus hc_convergence_run(const struct HcSetup *setup, struct HcConvergence **out);

// # Safety
// `run` must be null or a handle from [`hc_convergence_run`].
void hc_convergence_free(struct HcConvergence *run);

// Number of table rows (two per epsilon: `t = 0` and the final time).
//
// # Safety
// `run` must be a live handle and `out` valid for writes.
enum HcStatus hc_convergence_row_count(const struct HcConvergence *run, size_t *out);

// Row `index` as `(epsilon, t, error)`.
//
// # Safety
// `run` must be a live handle; the output pointers valid for writes.
enum HcStatus hc_convergence_row(const struct HcConvergence *run,
                                 size_t index,
                                 double *epsilon,
                                 double *t,
                                 double *error);

// Whether the sweep met its gates (errors strictly decreasing).
//
// # Safety
// `run` must be a live handle and `out` valid for writes.
enum HcStatus hc_convergence_passed(const struct HcConvergence *run, bool *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HICONTRAST_H */
