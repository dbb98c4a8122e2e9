#ifndef EOSLAB_H
#define EOSLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  EOSLAB_STATUS_OK = 0,
  EOSLAB_STATUS_NULL_POINTER = 1,
  EOSLAB_STATUS_INVALID_ARGUMENT = 2,
  EOSLAB_STATUS_CONFIG = 3,
  EOSLAB_STATUS_IO = 4,
  EOSLAB_STATUS_CORRUPT = 5,
  EOSLAB_STATUS_INCOMPLETE_RUN = 6,
  EOSLAB_STATUS_NUMERIC = 7,
  EOSLAB_STATUS_INTERNAL = 8,
} EoslabStatus;

/**
 * A generated or loaded cohort.
 */
typedef struct EoslabCohort EoslabCohort;

/**
 * An opened run directory.
 */
typedef struct EoslabRun EoslabRun;

/**
 * Library version as a static NUL-terminated string.
 */
const char *eoslab_version(void);

/**
 * Message of the most recent call on this thread if it failed, otherwise
 * NULL. Valid until the next library call on the same thread.
 */
const char *eoslab_last_error(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library.
 */
void eoslab_string_free(char *s);

/**
 * Generates a cohort; parameters not listed keep their defaults.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
EoslabStatus eoslab_cohort_generate(size_t n_patients,
                                    size_t total_patches,
                                    size_t patch_size,
                                    double domain_shift,
                                    uint64_t seed,
                                    EoslabCohort **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
EoslabStatus eoslab_cohort_load(const char *path, EoslabCohort **out);

/**
 * # Safety
 * `cohort` must be a live handle; `path` a NUL-terminated string.
 */
EoslabStatus eoslab_cohort_save(const EoslabCohort *cohort, const char *path);

/**
 * # Safety
 * `cohort` must be a live handle; `out` writable.
 */
EoslabStatus eoslab_cohort_patient_count(const EoslabCohort *cohort, size_t *out);

/**
 * Patches of one patient (by cohort index).
 *
 * # Safety
 * `cohort` must be a live handle; `out` writable.
 */
EoslabStatus eoslab_cohort_patch_count(const EoslabCohort *cohort, size_t patient, size_t *out);

/**
 * Copies one patch: `image` receives `3·size·size` interleaved RGB values
 * in `[0, 1]`, `mask` receives `size·size` bytes. Either buffer may be NULL
 * to skip it. `size` receives the patch side length.
 *
 * # Safety
 * Non-NULL buffers must hold `image_len` / `mask_len` elements.
 */
EoslabStatus eoslab_cohort_patch(const EoslabCohort *cohort,
                                 size_t patient,
                                 size_t patch,
                                 double *image,
                                 size_t image_len,
                                 uint8_t *mask,
                                 size_t mask_len,
                                 size_t *size);

/**
 * # Safety
 * `cohort` must be NULL or a handle not yet freed.
 */
void eoslab_cohort_free(EoslabCohort *cohort);

/**
 * Opens (or creates) a run directory. `config_path` may be NULL to reuse
 * the directory's own config echo, or the defaults for a new directory.
 *
 * # Safety
 * `root` must be NUL-terminated; `config_path` NULL or NUL-terminated.
 */
EoslabStatus eoslab_run_open(const char *root, const char *config_path, EoslabRun **out);

/**
 * Runs one stage by its command-line name: `gen-data`, `uncertainty`,
 * `graph`, `partition`, `train-baseline`, `train-mdan`, `train-ddpm`,
 * `evaluate` or `run-all`.
 *
 * # Safety
 * `run` must be a live handle; `stage` NUL-terminated.
 */
EoslabStatus eoslab_run_stage(const EoslabRun *run, const char *stage);

/**
 * The run's results report; free it with [`eoslab_string_free`].
 *
 * # Safety
 * `run` must be a live handle; `out` writable.
 */
EoslabStatus eoslab_run_report(const EoslabRun *run, char **out);

/**
 * # Safety
 * `run` must be NULL or a handle not yet freed.
 */
void eoslab_run_free(EoslabRun *run);

/**
 * Fréchet distance between two Gaussians of dimension `d`; covariances
 * are row-major `d·d` arrays.
 *
 * # Safety
 * `mu_*` must hold `d` values, `sigma_*` `d·d` values; `out` writable.
 */
EoslabStatus eoslab_fid(const double *mu_a,
                        const double *sigma_a,
                        const double *mu_b,
                        const double *sigma_b,
                        size_t d,
                        double *out);

/**
 * Pixel precision and recall of binary masks of length `n`.
 *
 * # Safety
 * `pred` and `truth` must hold `n` bytes; outputs writable.
 */
EoslabStatus eoslab_precision_recall(const uint8_t *pred,
                                     const uint8_t *truth,
                                     size_t n,
                                     double *precision,
                                     double *recall);

#endif  /* EOSLAB_H */
