#ifndef PEEL_FFI_H
#define PEEL_FFI_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum PeelStatus {
  PEEL_STATUS_OK = 0,
  PEEL_STATUS_NULL_POINTER = 1,
  PEEL_STATUS_INVALID_ARGUMENT = 2,
  PEEL_STATUS_IO = 3,
  PEEL_STATUS_INVALID_DATA = 4,
  PEEL_STATUS_INVALID_CONFIG = 5,
  PEEL_STATUS_MODEL = 6,
  PEEL_STATUS_TRAINING = 7,
  PEEL_STATUS_PANIC = 8,
} PeelStatus;

// Opaque dataset handle.
typedef struct PeelDataset PeelDataset;

// Opaque model handle.
typedef struct PeelModel PeelModel;

// Batch context used when assembling batches; see `ContextModel` in the core crate.
typedef struct PeelContext {
  double strength;
  double gain_lo;
  double gain_hi;
  double noise_sd;
} PeelContext;

typedef struct PeelMetrics {
  double mae;
  double mse;
  double r2;
} PeelMetrics;

// Message of the last failing call on this thread, or null. The pointer
// stays valid until the next failing call on this thread.
const char *peel_last_error(void);

// Library version as a static NUL-terminated string.
const char *peel_version(void);

// Loads a JSONL dataset.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum PeelStatus peel_dataset_load(const char *path, struct PeelDataset **out);

// Generates `n` samples from the default synthetic scenario with `seed`.
//
// # Safety
// `out` must be writable.
enum PeelStatus peel_dataset_generate(size_t n, uint64_t seed, struct PeelDataset **out);

// Number of samples, or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live handle.
size_t peel_dataset_len(const struct PeelDataset *ds);

// Copies the labels into `out` (length `len`, which must equal the dataset length).
//
// # Safety
// `ds` must be a live handle and `out` must hold `len` doubles.
enum PeelStatus peel_dataset_labels(const struct PeelDataset *ds, double *out, size_t len);

// # Safety
// `ds` must be null or a handle not freed before.
void peel_dataset_free(struct PeelDataset *ds);

// Trains a model from a TOML run config (null means defaults). Relative
// data paths resolve against `base_dir` (null means the working directory).
//
// # Safety
// String arguments must be null or NUL-terminated; `out` must be writable.
enum PeelStatus peel_train(const char *config_toml, const char *base_dir, struct PeelModel **out);

// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum PeelStatus peel_model_load(const char *path, struct PeelModel **out);

// # Safety
// `model` must be a live handle; `path` must be NUL-terminated.
enum PeelStatus peel_model_save(const struct PeelModel *model, const char *path);

// Number of causal layers, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t peel_model_depth(const struct PeelModel *model);

// Predictions in dataset order, batched sequentially with `batch_size`.
// A null `ctx` disables the batch context.
//
// # Safety
// Handles must be live; `out` must hold `len` doubles; `ctx` may be null.
enum PeelStatus peel_model_predict(const struct PeelModel *model,
                                   const struct PeelDataset *ds,
                                   size_t batch_size,
                                   uint64_t seed,
                                   const struct PeelContext *ctx,
                                   double *out,
                                   size_t len);

// MAE, MSE and R² under the fixed evaluation batching of `seed`.
//
// # Safety
// Handles must be live; `out` must be writable; `ctx` may be null.
enum PeelStatus peel_model_evaluate(const struct PeelModel *model,
                                    const struct PeelDataset *ds,
                                    size_t batch_size,
                                    uint64_t seed,
                                    const struct PeelContext *ctx,
                                    struct PeelMetrics *out);

// # Safety
// `model` must be null or a handle not freed before.
void peel_model_free(struct PeelModel *model);

// Runs the numerical theory checks; writes how many ran and how many passed.
//
// # Safety
// `passed` and `total` must be writable.
enum PeelStatus peel_verify_theory(uint64_t seed, size_t *passed, size_t *total);

#endif  /* PEEL_FFI_H */
