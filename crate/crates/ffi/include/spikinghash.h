#ifndef SPIKINGHASH_H
#define SPIKINGHASH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ShStatus {
  SH_STATUS_OK = 0,
  SH_STATUS_NULL_POINTER = 1,
  SH_STATUS_INVALID_ARGUMENT = 2,
  SH_STATUS_SHAPE = 3,
  SH_STATUS_IO = 4,
  SH_STATUS_FORMAT = 5,
  SH_STATUS_RUNTIME = 6,
  SH_STATUS_PANIC = 7,
} ShStatus;

/**
 * Database of packed codes with labels. Opaque to C.
 */
typedef struct ShIndex ShIndex;

/**
 * Loaded model. Opaque to C.
 */
typedef struct ShModel ShModel;

typedef struct ShModelInfo {
  size_t time_steps;
  size_t in_channels;
  size_t height;
  size_t width;
  size_t hash_bits;
  size_t classes;
} ShModelInfo;

typedef struct ShMetrics {
  double map;
  double acg;
  double dcg;
  double ndcg;
  size_t queries;
  size_t skipped_queries;
} ShMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static, NUL-terminated version string.
 */
const char *sh_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t sh_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum ShStatus sh_model_load(const char *path, struct ShModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`sh_model_load`] not yet freed.
 */
void sh_model_free(struct ShModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum ShStatus sh_model_info(const struct ShModel *model, struct ShModelInfo *out);

/**
 * Encodes `count` samples laid out as `[count, T, C, H, W]` into packed
 * codes, `ceil(L / 8)` bytes each, little-endian within bytes.
 *
 * # Safety
 * `frames` must hold `count·T·C·H·W` floats and `codes` `codes_len` bytes.
 */
enum ShStatus sh_model_encode(const struct ShModel *model,
                              const float *frames,
                              size_t count,
                              uint8_t *codes,
                              size_t codes_len);

/**
 * Builds an index from `count` packed `bits`-bit codes and their labels.
 *
 * # Safety
 * `codes` must hold `count·ceil(bits / 8)` bytes and `labels` `count`
 * values; `out` must be writable.
 */
enum ShStatus sh_index_new(const uint8_t *codes,
                           const uint32_t *labels,
                           size_t count,
                           size_t bits,
                           struct ShIndex **out);

/**
 * # Safety
 * `index` must be null or a handle from [`sh_index_new`] not yet freed.
 */
void sh_index_free(struct ShIndex *index);

/**
 * # Safety
 * `index` must be a live handle; `out` must be writable.
 */
enum ShStatus sh_index_len(const struct ShIndex *index, size_t *out);

/**
 * The `n` nearest items to a packed query, ties broken by item id.
 *
 * # Safety
 * `query` must hold `ceil(bits / 8)` bytes; `ids` and `distances` `n`
 * values each.
 */
enum ShStatus sh_hamming_rank(const struct ShIndex *index,
                              const uint8_t *query,
                              size_t n,
                              uint32_t *ids,
                              uint32_t *distances);

/**
 * mAP, ACG, DCG and NDCG at `top_n` for packed queries. `similar` holds
 * `similar_count` class pairs (two values each) with relevance 0.5.
 *
 * # Safety
 * `queries` must hold `count·ceil(bits / 8)` bytes, `labels` `count`
 * values, `similar` `2·similar_count` values; `out` must be writable.
 */
enum ShStatus sh_evaluate(const struct ShIndex *index,
                          const uint8_t *queries,
                          const uint32_t *labels,
                          size_t count,
                          const uint32_t *similar,
                          size_t similar_count,
                          size_t top_n,
                          struct ShMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPIKINGHASH_H */
