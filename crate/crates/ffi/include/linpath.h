#ifndef LINPATH_H
#define LINPATH_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum LpStatus {
  LP_STATUS_OK = 0,
  LP_STATUS_NULL_POINTER = 1,
  LP_STATUS_INVALID_ARGUMENT = 2,
  LP_STATUS_BUFFER_TOO_SMALL = 3,
  LP_STATUS_IO = 4,
  LP_STATUS_FORMAT = 5,
  LP_STATUS_NOT_CHECKPOINT = 6,
  LP_STATUS_VERSION = 7,
  LP_STATUS_CORRUPT = 8,
  LP_STATUS_INTEGRITY = 9,
  LP_STATUS_MISMATCH = 10,
  LP_STATUS_NUMERIC = 11,
  LP_STATUS_PANIC = 12,
  LP_STATUS_OTHER = 13,
} LpStatus;

typedef enum LpSplit {
  LP_SPLIT_TRAIN = 0,
  LP_SPLIT_TEST = 1,
} LpSplit;

typedef enum LpBnMode {
  LP_BN_MODE_INTERPOLATE = 0,
  LP_BN_MODE_RECALIBRATE = 1,
} LpBnMode;

typedef enum LpBarrierDefinition {
  LP_BARRIER_DEFINITION_MAX_ENDPOINT = 0,
  LP_BARRIER_DEFINITION_LINEAR_BASELINE = 1,
} LpBarrierDefinition;

/**
 * A loaded checkpoint.
 */
typedef struct LpCheckpoint LpCheckpoint;

/**
 * A loaded, normalized dataset split.
 */
typedef struct LpDataset LpDataset;

/**
 * Loss and error sampled along an interpolation path.
 */
typedef struct LpPathCurve LpPathCurve;

/**
 * Mean loss (nats) and error fraction over a dataset.
 */
typedef struct LpEval {
  double loss;
  double error;
  size_t examples;
} LpEval;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *lp_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lp_version(void);

/**
 * Writes the checkpoint iterations for a run of `t_max` iterations into
 * `out`. `*len` receives the schedule length; if it exceeds `capacity`
 * nothing is written and `LP_STATUS_BUFFER_TOO_SMALL` is returned, so a
 * call with `out = NULL, capacity = 0` queries the size.
 *
 * # Safety
 * `out` must point to `capacity` writable elements (or be NULL when
 * `capacity` is 0) and `len` must be writable.
 */
enum LpStatus lp_checkpoint_schedule(uint64_t t_max, uint64_t *out, size_t capacity, size_t *len);

/**
 * Loads and verifies a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum LpStatus lp_checkpoint_load(const char *path, struct LpCheckpoint **out);

/**
 * Writes a checkpoint to `path` atomically.
 *
 * # Safety
 * `ckpt` must come from this library; `path` must be NUL-terminated.
 */
enum LpStatus lp_checkpoint_save(const struct LpCheckpoint *ckpt, const char *path);

/**
 * # Safety
 * `ckpt` must be NULL or a handle from [`lp_checkpoint_load`] not yet freed.
 */
void lp_checkpoint_free(struct LpCheckpoint *ckpt);

/**
 * Training iteration the checkpoint was taken at (0 for NULL).
 *
 * # Safety
 * `ckpt` must be NULL or a live handle.
 */
uint64_t lp_checkpoint_iteration(const struct LpCheckpoint *ckpt);

/**
 * Seed of the run that produced the checkpoint (0 for NULL).
 *
 * # Safety
 * `ckpt` must be NULL or a live handle.
 */
uint64_t lp_checkpoint_seed(const struct LpCheckpoint *ckpt);

/**
 * Number of scalars in the flattened state (0 for NULL).
 *
 * # Safety
 * `ckpt` must be NULL or a live handle.
 */
size_t lp_checkpoint_param_count(const struct LpCheckpoint *ckpt);

/**
 * Copies the flattened state into `out` as doubles, widening f32 values
 * exactly. `len` must equal [`lp_checkpoint_param_count`].
 *
 * # Safety
 * `ckpt` must be a live handle and `out` must hold `len` doubles.
 */
enum LpStatus lp_checkpoint_params_f64(const struct LpCheckpoint *ckpt, double *out, size_t len);

/**
 * Loads an IDX image/label file pair (MNIST layout and normalization).
 *
 * # Safety
 * Both paths must be NUL-terminated and `out` writable.
 */
enum LpStatus lp_dataset_load_idx(const char *images,
                                  const char *labels,
                                  enum LpSplit split,
                                  struct LpDataset **out);

/**
 * Loads the train or test split of a CIFAR-10 binary batch directory.
 *
 * # Safety
 * `dir` must be NUL-terminated and `out` writable.
 */
enum LpStatus lp_dataset_load_cifar_dir(const char *dir,
                                        enum LpSplit split,
                                        struct LpDataset **out);

/**
 * Number of examples (0 for NULL).
 *
 * # Safety
 * `data` must be NULL or a live handle.
 */
size_t lp_dataset_len(const struct LpDataset *data);

/**
 * # Safety
 * `data` must be NULL or a handle from a `lp_dataset_load_*` call not yet
 * freed.
 */
void lp_dataset_free(struct LpDataset *data);

/**
 * Mean loss and error of a checkpoint over a dataset, in batches of
 * `batch_size` (0 means the whole dataset at once).
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum LpStatus lp_evaluate(const struct LpCheckpoint *ckpt,
                          const struct LpDataset *data,
                          size_t batch_size,
                          struct LpEval *out);

/**
 * Evaluates `n_points` states evenly spaced on the segment from `from` to
 * `to`, endpoints included. `calibration` is required in recalibrate mode
 * and ignored otherwise.
 *
 * # Safety
 * Handles must be live (`calibration` may be NULL); `out` writable.
 */
enum LpStatus lp_evaluate_path(const struct LpCheckpoint *from,
                               const struct LpCheckpoint *to,
                               const struct LpDataset *data,
                               size_t n_points,
                               enum LpBnMode mode,
                               const struct LpDataset *calibration,
                               struct LpPathCurve **out);

/**
 * Number of sampled points (0 for NULL).
 *
 * # Safety
 * `curve` must be NULL or a live handle.
 */
size_t lp_path_len(const struct LpPathCurve *curve);

/**
 * Reads point `index` of a curve. Any output pointer may be NULL.
 *
 * # Safety
 * `curve` must be a live handle; non-NULL outputs must be writable.
 */
enum LpStatus lp_path_point(const struct LpPathCurve *curve,
                            size_t index,
                            double *alpha,
                            double *loss,
                            double *error);

/**
 * Loss and error barrier of a curve.
 *
 * # Safety
 * `curve` must be a live handle; outputs writable.
 */
enum LpStatus lp_path_barrier(const struct LpPathCurve *curve,
                              enum LpBarrierDefinition def,
                              double *loss_barrier,
                              double *error_barrier);

/**
 * # Safety
 * `curve` must be NULL or a handle from [`lp_evaluate_path`] not yet freed.
 */
void lp_path_free(struct LpPathCurve *curve);

/**
 * Barrier of `n` sampled values at positions `alphas`.
 *
 * # Safety
 * `values` and `alphas` must each point to `n` doubles; `out` writable.
 */
enum LpStatus lp_barrier_height(const double *values,
                                const double *alphas,
                                size_t n,
                                enum LpBarrierDefinition def,
                                double *out);

/**
 * Largest rise between consecutive values, 0 for a non-increasing curve.
 *
 * # Safety
 * `values` must point to `n` doubles; `out` writable.
 */
enum LpStatus lp_monotonicity_violation(const double *values, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LINPATH_H */
