#ifndef FLOWFORGET_H
#define FLOWFORGET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum FfStatus {
  FF_STATUS_OK = 0,
  FF_STATUS_NULL_POINTER = 1,
  FF_STATUS_INVALID_ARGUMENT = 2,
  FF_STATUS_CONFIG = 3,
  FF_STATUS_NUMERIC = 4,
  FF_STATUS_IO = 5,
  FF_STATUS_FORMAT = 6,
  FF_STATUS_BUFFER_TOO_SMALL = 7,
  FF_STATUS_PANIC = 8,
} FfStatus;

// Resolved run configuration.
typedef struct FfConfig FfConfig;

// A stack of stage adapters.
typedef struct FfStack FfStack;

// A built toy world.
typedef struct FfWorld FfWorld;

// One evaluation row; field order matches `metrics.csv`.
typedef struct FfMetrics {
  uint64_t seed;
  double id_score;
  double id_avg;
  double mmd_retain;
  double retention_accuracy;
  double forget_rate;
  double leakage;
} FfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ff_version(void);

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len - 1` bytes) and returns the full message
// length without the terminator. Returns 0 when there is no error.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t ff_last_error_message(char *buf, size_t len);

// Default configuration.
//
// # Safety
// `out` must be a valid pointer to writable handle storage.
enum FfStatus ff_config_new(struct FfConfig **out);

// Defaults overlaid with a `key=value` file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` as in [`ff_config_new`].
enum FfStatus ff_config_load(const char *path, struct FfConfig **out);

// Sets one key; the configuration is left unchanged on error.
//
// # Safety
// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
enum FfStatus ff_config_set(struct FfConfig *cfg, const char *key, const char *value);

// # Safety
// `cfg` must be null or a handle from this library, not yet freed.
void ff_config_free(struct FfConfig *cfg);

// Builds the world described by `cfg`.
//
// # Safety
// `cfg` must be a live handle; `out` valid handle storage.
enum FfStatus ff_world_new(const struct FfConfig *cfg, struct FfWorld **out);

// Writes the latent dimension, observation dimension and identity count.
//
// # Safety
// `world` must be a live handle; each output pointer must be null or writable.
enum FfStatus ff_world_dims(const struct FfWorld *world,
                            size_t *latent_dim,
                            size_t *obs_dim,
                            size_t *identities);

// # Safety
// `world` must be null or a handle from this library, not yet freed.
void ff_world_free(struct FfWorld *world);

// Draws one latent of identity `id` from a generator seeded with `seed`.
//
// # Safety
// `world` must be a live handle; `out` must point to `len` writable doubles.
enum FfStatus ff_sample_identity(const struct FfWorld *world,
                                 size_t id,
                                 uint64_t seed,
                                 double *out,
                                 size_t len);

// Freshly initialized adapters for `cfg`; they reproduce the frozen
// generator exactly.
//
// # Safety
// `world` and `cfg` must be live handles; `out` valid handle storage.
enum FfStatus ff_stack_new(const struct FfWorld *world,
                           const struct FfConfig *cfg,
                           uint64_t seed,
                           struct FfStack **out);

// Unlearns the configured identities with run seed `seed`. On success
// `out` receives the trained stack and `metrics`, if not null, its
// evaluation.
//
// # Safety
// `world` and `cfg` must be live handles; `out` valid handle storage;
// `metrics` null or writable.
enum FfStatus ff_unlearn(const struct FfWorld *world,
                         const struct FfConfig *cfg,
                         uint64_t seed,
                         struct FfStack **out,
                         struct FfMetrics *metrics);

// Evaluates `stack` against the configured forgotten identities.
//
// # Safety
// Handles must be live; `metrics` must be writable.
enum FfStatus ff_evaluate(const struct FfWorld *world,
                          const struct FfStack *stack,
                          const struct FfConfig *cfg,
                          uint64_t seed,
                          struct FfMetrics *metrics);

// Generates one observation. A null `stack` means the frozen generator.
//
// # Safety
// `world` must be a live handle, `stack` null or live; `latent` must point
// to `latent_len` doubles and `out` to `out_len` writable doubles.
enum FfStatus ff_generate(const struct FfWorld *world,
                          const struct FfStack *stack,
                          const double *latent,
                          size_t latent_len,
                          double *out,
                          size_t out_len);

// Number of trainable parameters in the stack.
//
// # Safety
// `stack` must be a live handle and `count` writable.
enum FfStatus ff_stack_param_count(const struct FfStack *stack, size_t *count);

// Writes `adapter_<stage>.params` files into the directory `dir`.
//
// # Safety
// `stack` must be a live handle; `dir` a NUL-terminated path.
enum FfStatus ff_stack_save(const struct FfStack *stack, const char *dir);

// Loads checkpoints written by [`ff_stack_save`] or the CLI. Flow adapters
// use the solver from `cfg`.
//
// # Safety
// Handles must be live; `dir` a NUL-terminated path; `out` valid handle
// storage.
enum FfStatus ff_stack_load(const struct FfWorld *world,
                            const struct FfConfig *cfg,
                            const char *dir,
                            struct FfStack **out);

// # Safety
// `stack` must be null or a handle from this library, not yet freed.
void ff_stack_free(struct FfStack *stack);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWFORGET_H */
