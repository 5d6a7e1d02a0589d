#ifndef QFCONV_H
#define QFCONV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum QfcStatus {
  QFC_STATUS_OK = 0,
  QFC_STATUS_NULL_POINTER = 1,
  QFC_STATUS_INVALID_INPUT = 2,
  QFC_STATUS_CONFIG = 3,
  QFC_STATUS_NUMERICAL = 4,
  QFC_STATUS_MISSING_CACHE = 5,
  QFC_STATUS_IO = 6,
  // Output buffer too small; the required size was written.
  QFC_STATUS_BUFFER_TOO_SMALL = 7,
  QFC_STATUS_PANIC = 8,
} QfcStatus;

typedef enum QfcCycleName {
  QFC_CYCLE_NAME_A = 0,
  QFC_CYCLE_NAME_B = 1,
} QfcCycleName;

typedef enum QfcKappa {
  // Twice the optical vacuum coupling.
  QFC_KAPPA_TWO_GO = 0,
  QFC_KAPPA_ZERO = 1,
  // Use the explicit rate argument, ns^-1.
  QFC_KAPPA_EXPLICIT = 2,
} QfcKappa;

// Opaque cycle constants.
typedef struct QfcCycle QfcCycle;

// Opaque pulse schedule.
typedef struct QfcSchedule QfcSchedule;

// Summary of an optimization run.
typedef struct QfcOptimizeReport {
  double success;
  double loss;
  uint64_t evaluations;
  bool converged;
} QfcOptimizeReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *qfc_version(void);

// Message of the last failure on this thread, or NULL. Valid until the next failing call.
const char *qfc_last_error(void);

// # Safety
// `out_cycle` must be a valid pointer.
enum QfcStatus qfc_cycle_new(enum QfcCycleName name,
                             enum QfcKappa kappa,
                             double explicit_kappa,
                             struct QfcCycle **out_cycle);

// Optical cavity decay rate of the cycle, ns^-1.
//
// # Safety
// `cycle` must come from [`qfc_cycle_new`]; `out_kappa` must be valid.
enum QfcStatus qfc_cycle_kappa(const struct QfcCycle *cycle, double *out_kappa);

// # Safety
// `cycle` must come from [`qfc_cycle_new`] or be NULL; it must not be used afterwards.
void qfc_cycle_free(struct QfcCycle *cycle);

// Parses and validates a schedule document against `cycle`.
//
// # Safety
// Pointers must be valid; `toml` must be NUL-terminated.
enum QfcStatus qfc_schedule_from_toml(const struct QfcCycle *cycle,
                                      const char *toml,
                                      struct QfcSchedule **out_schedule);

// Writes the schedule document into `buf` (NUL-terminated).
//
// `out_needed` receives the size including the terminator; if `len` is
// smaller, nothing is written and `BufferTooSmall` is returned.
//
// # Safety
// `buf` must hold `len` bytes or be NULL with `len == 0`.
enum QfcStatus qfc_schedule_to_toml(const struct QfcSchedule *schedule,
                                    char *buf,
                                    size_t len,
                                    size_t *out_needed);

// Total duration of the schedule, ns.
//
// # Safety
// Pointers must be valid.
enum QfcStatus qfc_schedule_duration(const struct QfcSchedule *schedule, double *out_ns);

// # Safety
// `schedule` must come from this library or be NULL; it must not be used afterwards.
void qfc_schedule_free(struct QfcSchedule *schedule);

// Success probability of one master-equation run from the absorbing state.
//
// `tol` bounds the change of every final population when the step is halved.
//
// # Safety
// Pointers must be valid.
enum QfcStatus qfc_simulate(const struct QfcCycle *cycle,
                            const struct QfcSchedule *schedule,
                            double tol,
                            double *out_success);

// Optimizes a protocol of duration `tau_ns`.
//
// `parametrization` is `"gaussian"`, `"piecewise:N"` or `"constant"` (the
// constant-drive baseline). `config_toml` may be NULL for the default
// optimizer settings; `seed` always overrides the seed it holds.
//
// # Safety
// Pointers other than `config_toml` must be valid; strings NUL-terminated.
enum QfcStatus qfc_optimize(const struct QfcCycle *cycle,
                            double tau_ns,
                            const char *parametrization,
                            const char *config_toml,
                            uint64_t seed,
                            struct QfcSchedule **out_schedule,
                            struct QfcOptimizeReport *out_report);

// Capacity (qubits per use) of the loss channel with loss probability `p`.
//
// # Safety
// `out_capacity` must be valid.
enum QfcStatus qfc_capacity(double p, double *out_capacity);

// Coherent information for the input with excited population `q` and coherence `c_re + i c_im`.
//
// # Safety
// `out_bits` must be valid.
enum QfcStatus qfc_coherent_information(double q,
                                        double c_re,
                                        double c_im,
                                        double p,
                                        double *out_bits);

// Communication rate in Mqb/s for protocol duration `tau_ns`, loss `p` and readout window `io_window_ns`.
//
// # Safety
// `out_rate` must be valid.
enum QfcStatus qfc_comm_rate(double tau_ns,
                             double p,
                             double io_window_ns,
                             double *out_rate);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QFCONV_H */
