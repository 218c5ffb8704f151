#ifndef DSRH_H
#define DSRH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum DsrhStatus {
  DSRH_STATUS_OK = 0,
  DSRH_STATUS_NULL_POINTER = 1,
  DSRH_STATUS_INVALID_ARGUMENT = 2,
  DSRH_STATUS_IO = 3,
  DSRH_STATUS_FORMAT = 4,
  DSRH_STATUS_DIMENSION_MISMATCH = 5,
  DSRH_STATUS_BITS_MISMATCH = 6,
  DSRH_STATUS_BUFFER_TOO_SMALL = 7,
  /**
   * The metric is undefined for this input (no relevant item).
   */
  DSRH_STATUS_EXCLUDED = 8,
  DSRH_STATUS_INTERNAL = 9,
} DsrhStatus;

/**
 * A database of packed binary codes keyed by 64-bit ids.
 */
typedef struct DsrhCodeDb DsrhCodeDb;

/**
 * A trained hash model.
 */
typedef struct DsrhModel DsrhModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *dsrh_last_error_message(void);

/**
 * Static description of a status code.
 */
const char *dsrh_status_string(enum DsrhStatus status);

/**
 * Loads a checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum DsrhStatus dsrh_model_load(const char *path, struct DsrhModel **out);

/**
 * # Safety
 * `model` is null or a handle from [`dsrh_model_load`] not yet freed.
 */
void dsrh_model_free(struct DsrhModel *model);

/**
 * Code length K, or 0 for a null handle.
 *
 * # Safety
 * `model` is null or a live handle.
 */
size_t dsrh_model_bits(const struct DsrhModel *model);

/**
 * Feature dimension D, or 0 for a null handle.
 *
 * # Safety
 * `model` is null or a live handle.
 */
size_t dsrh_model_input_dim(const struct DsrhModel *model);

/**
 * Bytes per packed code for a K-bit model.
 */
size_t dsrh_code_bytes(size_t bits);

/**
 * Encodes `count` row-major feature vectors of length `dim` into packed
 * binary codes, `dsrh_code_bytes(K)` bytes each, written to `out`.
 *
 * # Safety
 * `features` holds `count * dim` doubles; `out` has `out_len` writable bytes.
 */
enum DsrhStatus dsrh_model_encode(const struct DsrhModel *model,
                                  const double *features,
                                  size_t count,
                                  size_t dim,
                                  uint8_t *out,
                                  size_t out_len);

/**
 * Creates an empty database of `bits`-bit codes.
 *
 * # Safety
 * `out` is writable.
 */
enum DsrhStatus dsrh_codes_new(size_t bits, struct DsrhCodeDb **out);

/**
 * Loads a code file written by `dsrh encode`.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum DsrhStatus dsrh_codes_load(const char *path, struct DsrhCodeDb **out);

/**
 * # Safety
 * `db` is null or a live handle.
 */
void dsrh_codes_free(struct DsrhCodeDb *db);

/**
 * Number of codes, or 0 for a null handle.
 *
 * # Safety
 * `db` is null or a live handle.
 */
size_t dsrh_codes_len(const struct DsrhCodeDb *db);

/**
 * Code length K, or 0 for a null handle.
 *
 * # Safety
 * `db` is null or a live handle.
 */
size_t dsrh_codes_bits(const struct DsrhCodeDb *db);

/**
 * Appends one packed code. Ids must be unique.
 *
 * # Safety
 * `db` is a live handle; `code` holds `code_len` bytes.
 */
enum DsrhStatus dsrh_codes_push(struct DsrhCodeDb *db,
                                uint64_t id,
                                const uint8_t *code,
                                size_t code_len);

/**
 * The `k` nearest codes by Hamming distance, ties in insertion order.
 * Writes `min(k, len, capacity)` results to `out_ids`/`out_distances` and
 * the count to `*out_count`. `out_distances` may be null.
 *
 * # Safety
 * `db` is a live handle; `query` holds `query_len` bytes; `out_ids` (and
 * `out_distances` if not null) have room for `capacity` elements.
 */
enum DsrhStatus dsrh_codes_search(const struct DsrhCodeDb *db,
                                  const uint8_t *query,
                                  size_t query_len,
                                  size_t k,
                                  uint64_t *out_ids,
                                  uint32_t *out_distances,
                                  size_t capacity,
                                  size_t *out_count);

/**
 * Hamming distance between two packed `bits`-bit codes.
 *
 * # Safety
 * `a` and `b` hold `dsrh_code_bytes(bits)` bytes each; `out` is writable.
 */
enum DsrhStatus dsrh_hamming_distance(const uint8_t *a,
                                      const uint8_t *b,
                                      size_t bits,
                                      uint32_t *out);

/**
 * NDCG@p of a ranked list of similarity levels. `DSRH_STATUS_EXCLUDED`
 * when no item is relevant.
 *
 * # Safety
 * `levels` holds `len` values; `out` is writable.
 */
enum DsrhStatus dsrh_ndcg_at(const uint32_t *levels, size_t len, size_t p, double *out);

/**
 * ACG@p, the mean level of the top `p` items (clamped to `len`).
 *
 * # Safety
 * `levels` holds `len` values; `out` is writable.
 */
enum DsrhStatus dsrh_acg_at(const uint32_t *levels, size_t len, size_t p, double *out);

/**
 * ACG-weighted average precision over the whole list, or over the first
 * `truncation` positions when it is non-zero.
 *
 * # Safety
 * `levels` holds `len` values; `out` is writable.
 */
enum DsrhStatus dsrh_average_precision_w(const uint32_t *levels,
                                         size_t len,
                                         size_t truncation,
                                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DSRH_H */
