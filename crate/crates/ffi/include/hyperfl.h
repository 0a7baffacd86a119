#ifndef HYPERFL_H
#define HYPERFL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. `HFL_STATUS_OK` is zero.
typedef enum HflStatus {
  HFL_STATUS_OK = 0,
  HFL_STATUS_CONFIG = 1,
  HFL_STATUS_DIMENSION = 2,
  HFL_STATUS_CAPABILITY = 3,
  HFL_STATUS_CAPACITY = 4,
  HFL_STATUS_NUMERIC = 5,
  HFL_STATUS_DEGENERATE_GRADIENT = 6,
  HFL_STATUS_IO = 7,
  HFL_STATUS_FORMAT = 8,
  HFL_STATUS_CONSISTENCY = 9,
  HFL_STATUS_NULL_POINTER = 10,
  HFL_STATUS_INVALID_UTF8 = 11,
  HFL_STATUS_BUFFER_TOO_SMALL = 12,
  HFL_STATUS_PANIC = 13,
} HflStatus;

// Opaque simulator handle.
typedef struct HflSimulator HflSimulator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *hfl_version(void);

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *hfl_last_error(void);

// Builds a simulator from an experiment configuration in JSON and records
// the initial state. `*out` is set only on success.
//
// # Safety
// `config_json` must be a NUL-terminated string and `out` a valid pointer.
enum HflStatus hfl_simulator_new(const char *config_json, struct HflSimulator **out);

// Releases a simulator. Null is ignored.
//
// # Safety
// `sim` must come from [`hfl_simulator_new`] and not be used afterwards.
void hfl_simulator_free(struct HflSimulator *sim);

// Runs one communication round. `mean_test_acc` may be null.
//
// # Safety
// `sim` must be a live handle; `mean_test_acc` null or writable.
enum HflStatus hfl_simulator_run_round(struct HflSimulator *sim, double *mean_test_acc);

// Rounds completed so far.
//
// # Safety
// `sim` must be a live handle and `out` writable.
enum HflStatus hfl_simulator_round(const struct HflSimulator *sim, uint64_t *out);

// # Safety
// `sim` must be a live handle and `out` writable.
enum HflStatus hfl_simulator_num_clients(const struct HflSimulator *sim, size_t *out);

// Test accuracy of one client's current model.
//
// # Safety
// `sim` must be a live handle and `out` writable.
enum HflStatus hfl_simulator_client_accuracy(const struct HflSimulator *sim,
                                             size_t client,
                                             double *out);

// Copies the metrics CSV recorded so far into `buf`, NUL-terminated.
// `*len` receives the CSV length without the terminator; when `cap` is too
// small nothing is copied and `HFL_STATUS_BUFFER_TOO_SMALL` is returned, so
// a call with `buf = NULL, cap = 0` queries the size.
//
// # Safety
// `sim` must be a live handle, `len` writable, and `buf` writable for
// `cap` bytes unless null.
enum HflStatus hfl_simulator_metrics_csv(const struct HflSimulator *sim,
                                         char *buf,
                                         size_t cap,
                                         size_t *len);

// Peak signal-to-noise ratio in dB of two arrays of `n` values.
//
// # Safety
// `a` and `b` must point to `n` readable doubles; `out` must be writable.
enum HflStatus hfl_psnr(const double *a, const double *b, size_t n, double max_val, double *out);

// Mean SSIM of two row-major `rows x cols` images with range 1.
//
// # Safety
// `a` and `b` must point to `rows * cols` readable doubles; `out` must be
// writable.
enum HflStatus hfl_ssim(const double *a, const double *b, size_t rows, size_t cols, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYPERFL_H */
