#ifndef STEPCERT_H
#define STEPCERT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
enum StepcertStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  /**
   * The call succeeded; for decision procedures, the positive outcome.
   */
  StepcertStatus_Ok = 0,
  /**
   * The run completed and the answer is negative: not certified, or a
   * verification that failed.
   */
  StepcertStatus_NotCertified = 2,
  /**
   * A required pointer argument was null.
   */
  StepcertStatus_NullArgument = -1,
  /**
   * A scalar, buffer, or handle argument is malformed or out of range.
   */
  StepcertStatus_InvalidArgument = -2,
  /**
   * A JSON document failed to parse or validate.
   */
  StepcertStatus_ParseError = -3,
  /**
   * The solver or evaluator failed internally.
   */
  StepcertStatus_InternalError = -4,
  /**
   * A panic was caught at the boundary; state may be inconsistent.
   */
  StepcertStatus_Panic = -5,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum StepcertStatus StepcertStatus;
#else
typedef int32_t StepcertStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * A stability certificate.
 */
typedef struct StepcertCertificate StepcertCertificate;

/**
 * A validated system plus the solve options its config carried.
 */
typedef struct StepcertSystem StepcertSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static null-terminated string.
 */
const char *stepcert_version(void);

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *stepcert_last_error(void);

/**
 * Frees a string returned through a `char**` out parameter.
 *
 * # Safety
 * `s` must have come from this library and not have been freed already.
 */
void stepcert_string_free(char *s);

/**
 * Parses and validates a system from its JSON description. On success
 * writes a new handle to `out`; free it with [`stepcert_system_free`].
 *
 * # Safety
 * `json` must be a valid null-terminated string and `out` a valid
 * pointer.
 */
StepcertStatus stepcert_system_from_json(const char *json, struct StepcertSystem **out);

/**
 * Releases a system handle. Null is a no-op.
 *
 * # Safety
 * `sys` must have come from [`stepcert_system_from_json`] and not have
 * been freed already.
 */
void stepcert_system_free(struct StepcertSystem *sys);

/**
 * Writes the state and input dimensions of the system.
 *
 * # Safety
 * All pointers must be valid.
 */
StepcertStatus stepcert_system_dims(const struct StepcertSystem *sys, size_t *n_p, size_t *n_u);

/**
 * Runs the certification pipeline. `eps` and `time_limit_s` override the
 * config when positive; pass `0` to keep the configured values. On
 * [`StepcertStatus::Ok`] writes a verified certificate handle to `out`;
 * on [`StepcertStatus::NotCertified`] the diagnostic is available via
 * [`stepcert_last_error`] and `out` is untouched.
 *
 * # Safety
 * `sys` must be a live system handle and `out` a valid pointer.
 */
StepcertStatus stepcert_certify(const struct StepcertSystem *sys,
                                double eps,
                                double time_limit_s,
                                struct StepcertCertificate **out);

/**
 * Parses a certificate from JSON. Free the handle with
 * [`stepcert_certificate_free`].
 *
 * # Safety
 * `json` must be a valid null-terminated string and `out` a valid
 * pointer.
 */
StepcertStatus stepcert_certificate_from_json(const char *json, struct StepcertCertificate **out);

/**
 * Serializes a certificate to a newly allocated JSON string; release it
 * with [`stepcert_string_free`].
 *
 * # Safety
 * `cert` must be a live certificate handle and `out` a valid pointer.
 */
StepcertStatus stepcert_certificate_to_json(const struct StepcertCertificate *cert, char **out);

/**
 * Releases a certificate handle. Null is a no-op.
 *
 * # Safety
 * `cert` must have come from this library and not have been freed
 * already.
 */
void stepcert_certificate_free(struct StepcertCertificate *cert);

/**
 * Recomputes every certified inequality from scratch. Returns
 * [`StepcertStatus::Ok`] when the certificate passes at tolerance `tol`
 * (pass `0` for the default `1e-7`), [`StepcertStatus::NotCertified`]
 * when it fails.
 *
 * # Safety
 * `sys` and `cert` must be live handles.
 */
StepcertStatus stepcert_verify(const struct StepcertSystem *sys,
                               const struct StepcertCertificate *cert,
                               double tol);

/**
 * Evaluates the certified function `W(x) = sup V(x)` at a state.
 *
 * # Safety
 * `x` must point to `x_len` doubles; `out_value` must be valid.
 */
StepcertStatus stepcert_sup_v(const struct StepcertSystem *sys,
                              const struct StepcertCertificate *cert,
                              const double *x,
                              size_t x_len,
                              double *out_value);

/**
 * Simulates the closed loop for `steps` steps and writes the states
 * row-major into the caller's buffer of `out_len >= (steps + 1) * n_p`
 * doubles. `policy` is `0` for the strict step, `1` for uniform random
 * selections on the switching surfaces (seeded by `seed`), `2` for the
 * norm-maximizing extreme selection.
 *
 * # Safety
 * `x0` must point to `x0_len` doubles and `out_states` to `out_len`
 * writable doubles.
 */
StepcertStatus stepcert_simulate(const struct StepcertSystem *sys,
                                 const double *x0,
                                 size_t x0_len,
                                 size_t steps,
                                 int32_t policy,
                                 uint64_t seed,
                                 double *out_states,
                                 size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STEPCERT_H */
