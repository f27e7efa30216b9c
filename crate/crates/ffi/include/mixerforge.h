#ifndef MIXERFORGE_H
#define MIXERFORGE_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MfStatus {
  MF_STATUS_OK = 0,
  MF_STATUS_NULL_POINTER = 1,
  MF_STATUS_INVALID_ARGUMENT = 2,
  MF_STATUS_SHAPE = 3,
  MF_STATUS_CONFIG = 4,
  MF_STATUS_NUMERIC = 5,
  MF_STATUS_IO = 6,
  MF_STATUS_BUFFER_TOO_SMALL = 7,
  MF_STATUS_OVERFLOW = 8,
  MF_STATUS_PANIC = 9,
} MfStatus;

/**
 * A mixer layer with its weights.
 */
typedef struct MfMixer MfMixer;

/**
 * A hybrid network with its weights.
 */
typedef struct MfModel MfModel;

/**
 * Whole-model forward cost at one sequence length.
 */
typedef struct MfCostReport {
  uint64_t per_token_flops;
  uint64_t per_sequence_flops;
  uint64_t kv_cache_bytes;
  uint64_t linear_layers;
  uint64_t full_layers;
  /**
   * 1 when every count is an exact integer.
   */
  uint8_t exact;
} MfCostReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *mf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mf_version(void);

/**
 * Creates a randomly initialized mixer. Single-head kinds require
 * `heads == 1`. `d_model = heads * head_dim`.
 *
 * # Safety
 * `kind` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MfStatus mf_mixer_new(const char *kind,
                           size_t heads,
                           size_t head_dim,
                           uint64_t seed,
                           struct MfMixer **out);

/**
 * # Safety
 * `mixer` must come from [`mf_mixer_new`] and not be used afterwards.
 */
void mf_mixer_free(struct MfMixer *mixer);

/**
 * Width of the mixer's input and output rows, or 0 for a null handle.
 *
 * # Safety
 * `mixer` must be null or a live handle.
 */
size_t mf_mixer_d_model(const struct MfMixer *mixer);

/**
 * Sequential scan over `tokens` (`len` rows of `d_model`, row-major)
 * into `out` of the same size.
 *
 * # Safety
 * `tokens` and `out` must each hold `len * d_model` doubles.
 */
enum MfStatus mf_mixer_scan(const struct MfMixer *mixer,
                            const double *tokens,
                            size_t len,
                            double *out);

/**
 * Same contract as [`mf_mixer_scan`] through the quadratic unrolled form.
 *
 * # Safety
 * `tokens` and `out` must each hold `len * d_model` doubles.
 */
enum MfStatus mf_mixer_oracle(const struct MfMixer *mixer,
                              const double *tokens,
                              size_t len,
                              double *out);

/**
 * Exact per-token FLOPs of one mixer layer as `numer / denom`.
 *
 * # Safety
 * `kind` must be a NUL-terminated string; `numer` and `denom` valid pointers.
 */
enum MfStatus mf_per_token_flops(const char *kind,
                                 size_t d_model,
                                 size_t heads,
                                 uint64_t *numer,
                                 uint64_t *denom);

/**
 * Whole-model cost for a JSON model config at length `len`.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MfStatus mf_model_cost(const char *config_json,
                            size_t len,
                            size_t element_size,
                            struct MfCostReport *out);

/**
 * Builds a model from a JSON config with seeded random weights.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MfStatus mf_model_new(const char *config_json, uint64_t seed, struct MfModel **out);

/**
 * Loads a model from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MfStatus mf_model_load(const char *path, struct MfModel **out);

/**
 * Writes the model to a checkpoint file, replacing it.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum MfStatus mf_model_save(const struct MfModel *model, const char *path);

/**
 * # Safety
 * `model` must come from [`mf_model_new`] or [`mf_model_load`] and not be
 * used afterwards.
 */
void mf_model_free(struct MfModel *model);

/**
 * Vocabulary size, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mf_model_vocab(const struct MfModel *model);

/**
 * Parameter count, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t mf_model_param_count(const struct MfModel *model);

/**
 * Next-token logits for `len` tokens into `logits` (`len * vocab`
 * doubles, row-major). Fails with `BufferTooSmall` when `capacity` is
 * short; `required` (if non-null) always receives the needed count.
 *
 * # Safety
 * `tokens` must hold `len` values and `logits` `capacity` doubles.
 */
enum MfStatus mf_model_forward(const struct MfModel *model,
                               const uint32_t *tokens,
                               size_t len,
                               double *logits,
                               size_t capacity,
                               size_t *required);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIXERFORGE_H */
