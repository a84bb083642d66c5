#ifndef NGSO_BEAMFORM_H
#define NGSO_BEAMFORM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

#define NGSO_OK 0

// Invalid configuration or argument.
#define NGSO_ERR_CONFIG 1

// Singular covariance, degenerate geometry, non-finite values.
#define NGSO_ERR_NUMERICAL 2

// File or format error.
#define NGSO_ERR_IO 3

#define NGSO_ERR_NULL 4

// Output buffer shorter than required.
#define NGSO_ERR_BUFFER 5

#define NGSO_ERR_PANIC 6

#define NGSO_METHOD_INITIAL 0

#define NGSO_METHOD_MRC 1

#define NGSO_METHOD_ZF 2

#define NGSO_METHOD_SMI 3

#define NGSO_METHOD_MVDR 4

// A trained network loaded from a checkpoint.
typedef struct NgsoModel NgsoModel;

// One sampled scenario with its snapshots and channel estimates.
typedef struct NgsoScenario NgsoScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failure on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *ngso_last_error(void);

// Library version as a static NUL-terminated string.
const char *ngso_version(void);

// Samples a scenario and `snapshots` snapshots from `seed`.
//
// `config_toml` may be NULL for the built-in defaults. A non-zero
// `imperfect_csi` draws a perturbed desired channel with the configured
// error variance for the baselines.
//
// # Safety
// `config_toml` must be NULL or a valid C string; `out` must be writable.
int ngso_scenario_new(const char *config_toml,
                      uint64_t seed,
                      size_t snapshots,
                      int imperfect_csi,
                      NgsoScenario **out);

// # Safety
// `scenario` must be NULL or a handle from `ngso_scenario_new` not yet freed.
void ngso_scenario_free(NgsoScenario *scenario);

// Number of array elements `M`, or 0 for NULL.
//
// # Safety
// `scenario` must be NULL or a live handle.
size_t ngso_scenario_num_elements(const NgsoScenario *scenario);

// Number of snapshots `L`, or 0 for NULL.
//
// # Safety
// `scenario` must be NULL or a live handle.
size_t ngso_scenario_num_snapshots(const NgsoScenario *scenario);

// Noise power in watts, or NaN for NULL.
//
// # Safety
// `scenario` must be NULL or a live handle.
double ngso_scenario_noise_power(const NgsoScenario *scenario);

// Copies the `M × L` snapshot matrix, element-major, into `out`
// (`2·M·L` doubles).
//
// # Safety
// `scenario` must be a live handle; `out` must hold `len` doubles.
int ngso_scenario_snapshots(const NgsoScenario *scenario, double *out, size_t len);

// Writes the weights of a closed-form beamformer (`NGSO_METHOD_*`) into
// `out` (`2·M` doubles).
//
// # Safety
// `scenario` must be a live handle; `out` must hold `len` doubles.
int ngso_scenario_weights(const NgsoScenario *scenario, int method, double *out, size_t len);

// Output SINR (linear) of interleaved weights `w` (`2·M` doubles) against
// the true channels.
//
// # Safety
// `scenario` must be a live handle; `w` must hold `len` doubles; `out` must
// be writable.
int ngso_scenario_sinr(const NgsoScenario *scenario, const double *w, size_t len, double *out);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a valid C string; `out` must be writable.
int ngso_model_load(const char *path, NgsoModel **out);

// # Safety
// `model` must be NULL or a handle from `ngso_model_load` not yet freed.
void ngso_model_free(NgsoModel *model);

// Array size `M` the model was trained for, or 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
size_t ngso_model_num_elements(const NgsoModel *model);

// Snapshot count `L` the model expects, or 0 for NULL.
//
// # Safety
// `model` must be NULL or a live handle.
size_t ngso_model_num_snapshots(const NgsoModel *model);

// Unit-norm network weights for an `m × l` snapshot matrix given
// element-major and interleaved (`2·m·l` doubles). Writes `2·m` doubles.
//
// # Safety
// `model` must be a live handle; `snapshots` must hold `2·m·l` doubles and
// `out` `len` doubles.
int ngso_model_infer(const NgsoModel *model,
                     const double *snapshots,
                     size_t m,
                     size_t l,
                     double *out,
                     size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NGSO_BEAMFORM_H */
