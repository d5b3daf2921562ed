#ifndef HOHMM_H
#define HOHMM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HohmmStatus {
  HOHMM_STATUS_OK = 0,
  HOHMM_STATUS_NULL_POINTER = 1,
  HOHMM_STATUS_INVALID_ARGUMENT = 2,
  HOHMM_STATUS_INVALID_PARAMETERS = 3,
  HOHMM_STATUS_INVALID_DATA = 4,
  HOHMM_STATUS_NUMERICAL = 5,
  HOHMM_STATUS_ESTIMATION = 6,
  HOHMM_STATUS_BUFFER_TOO_SMALL = 7,
  HOHMM_STATUS_PANIC = 8,
} HohmmStatus;

// Opaque model handle.
typedef struct HohmmModel HohmmModel;

typedef struct HohmmFitOptions {
  size_t max_iterations;
  double rel_tolerance;
  size_t n_starts;
  uint64_t seed;
} HohmmFitOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the message of the last failed call on this thread, or returns
// null if there was none. Free the result with [`hohmm_string_free`].
char *hohmm_last_error_message(void);

// # Safety
// `s` must be null or a string returned by this library, not yet freed.
void hohmm_string_free(char *s);

// Builds a model from the JSON parameter layout
// `{k, h, sigma, early, pi}`.
//
// # Safety
// `json` must be a nul-terminated string and `out` a valid pointer.
enum HohmmStatus hohmm_model_from_json(const char *json, struct HohmmModel **out);

// Serializes a model to the JSON parameter layout. Free the result with
// [`hohmm_string_free`].
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum HohmmStatus hohmm_model_to_json(const struct HohmmModel *model, char **out);

// # Safety
// `model` must be null or a handle from this library, not yet freed.
void hohmm_model_free(struct HohmmModel *model);

// Number of states, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t hohmm_model_k(const struct HohmmModel *model);

// Chain order, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t hohmm_model_h(const struct HohmmModel *model);

// Log-likelihood of `len` observations.
//
// # Safety
// `y` must point to `len` doubles and `out` to one.
enum HohmmStatus hohmm_loglik(const struct HohmmModel *model,
                              const double *y,
                              size_t len,
                              double *out);

// Posterior state marginals as a row-major `len × k` table.
//
// # Safety
// `y` must point to `len` doubles and `out` to `out_len` doubles.
enum HohmmStatus hohmm_marginals(const struct HohmmModel *model,
                                 const double *y,
                                 size_t len,
                                 double *out,
                                 size_t out_len);

// Most probable state at each occasion (0-based).
//
// # Safety
// `y` must point to `len` doubles and `out` to `len` elements.
enum HohmmStatus hohmm_decode(const struct HohmmModel *model,
                              const double *y,
                              size_t len,
                              size_t *out);

struct HohmmFitOptions hohmm_fit_options_default(void);

// Fits an `(h, k)` model by EM and returns a new handle with states
// ordered by increasing volatility. `options` may be null for defaults;
// `out_loglik` may be null.
//
// # Safety
// `y` must point to `len` doubles, `out_model` must be valid and
// `options`/`out_loglik` null or valid.
enum HohmmStatus hohmm_fit(const double *y,
                           size_t len,
                           size_t h,
                           size_t k,
                           const struct HohmmFitOptions *options,
                           struct HohmmModel **out_model,
                           double *out_loglik);

// Free parameters of an `(h, k)` model, or 0 if `k` is 0.
size_t hohmm_param_count(size_t k, size_t h);

// `-2 loglik + npar ln(len)`.
double hohmm_bic(double loglik, size_t npar, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HOHMM_H */
