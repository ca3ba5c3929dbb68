#ifndef GRADEX_H
#define GRADEX_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum GxStatus {
  GX_STATUS_OK = 0,
  GX_STATUS_NULL_POINTER = 1,
  GX_STATUS_INVALID_ARGUMENT = 2,
  GX_STATUS_NUMERIC = 3,
  GX_STATUS_STALE = 4,
  GX_STATUS_IO = 5,
  GX_STATUS_FORMAT = 6,
  GX_STATUS_PANIC = 7,
} GxStatus;

// Affinity matrix built from scored subsets.
typedef struct GxAffinity GxAffinity;

// Grouping of tasks into disjoint clusters.
typedef struct GxPartition GxPartition;

// Projected gradient store loaded from disk.
typedef struct GxStore GxStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` as a
// NUL-terminated string, truncating to `cap - 1` bytes. Returns the full
// message length in bytes, excluding the terminator.
//
// # Safety
// `buf` must point to `cap` writable bytes or be null with `cap == 0`.
size_t gx_last_error_message(char *buf, size_t cap);

// Library version as a static NUL-terminated string.
const char *gx_version(void);

// Builds the affinity matrix from `m` scored subsets. Subset `l` has
// `lengths[l]` members stored consecutively in `members`.
//
// # Safety
// `members` holds `sum(lengths)` entries, `lengths` and `scores` hold `m`.
enum GxStatus gx_affinity_build(size_t n,
                                const size_t *members,
                                const size_t *lengths,
                                const double *scores,
                                size_t m,
                                struct GxAffinity **out);

// # Safety
// `a` is a live handle; `n` is writable.
enum GxStatus gx_affinity_n(const struct GxAffinity *a, size_t *n);

// Row-major copy of the `n x n` values into `out`, which holds `len` entries.
//
// # Safety
// `a` is a live handle; `out` holds `len` writable doubles.
enum GxStatus gx_affinity_values(const struct GxAffinity *a, double *out, size_t len);

// Number of unordered task pairs (including diagonal) never seen together.
//
// # Safety
// `a` is a live handle; `count` is writable.
enum GxStatus gx_affinity_missing_pairs(const struct GxAffinity *a, size_t *count);

// # Safety
// `a` comes from [`gx_affinity_build`] and is not used afterwards.
void gx_affinity_free(struct GxAffinity *a);

// Solves the relaxation with `tr X = k` for the row-major `n x n` matrix
// `u`. Writes `X` row-major into `x_out` and the objective `<U, X>`.
//
// # Safety
// `u` and `x_out` hold `n * n` doubles; `objective` is writable or null.
enum GxStatus gx_relax(const double *u,
                       size_t n,
                       size_t k,
                       double *x_out,
                       double *objective,
                       bool *converged);

// Rounds a relaxation solution `x` into `k` groups, breaking ties by
// density under `u`.
//
// # Safety
// `x` and `u` hold `n * n` doubles.
enum GxStatus gx_round(const double *x,
                       const double *u,
                       size_t n,
                       size_t k,
                       uint64_t seed,
                       struct GxPartition **out);

// Relaxation followed by rounding.
//
// # Safety
// `u` holds `n * n` doubles.
enum GxStatus gx_cluster(const double *u,
                         size_t n,
                         size_t k,
                         uint64_t seed,
                         struct GxPartition **out);

// Partition from one group label per task.
//
// # Safety
// `labels` holds `n` entries.
enum GxStatus gx_partition_from_labels(const size_t *labels, size_t n, struct GxPartition **out);

// Task count and group count.
//
// # Safety
// `p` is a live handle; `n` and `k` are writable or null.
enum GxStatus gx_partition_shape(const struct GxPartition *p, size_t *n, size_t *k);

// Group label of every task; groups are numbered by their smallest member.
//
// # Safety
// `p` is a live handle; `out` holds `len` writable entries.
enum GxStatus gx_partition_labels(const struct GxPartition *p, size_t *out, size_t len);

// # Safety
// `p` comes from this library and is not used afterwards.
void gx_partition_free(struct GxPartition *p);

// Normalized mutual information of two partitions of the same tasks.
//
// # Safety
// `a` and `b` are live handles; `out` is writable.
enum GxStatus gx_nmi(const struct GxPartition *a, const struct GxPartition *b, double *out);

// Loads a gradient store written by the extraction stage.
//
// # Safety
// `path` is a NUL-terminated UTF-8 string.
enum GxStatus gx_store_load(const char *path, struct GxStore **out);

// Task count, projected dimension and record count of a store.
//
// # Safety
// `s` is a live handle; outputs are writable or null.
enum GxStatus gx_store_shape(const struct GxStore *s, size_t *n_tasks, size_t *d, size_t *records);

// # Safety
// `s` comes from [`gx_store_load`] and is not used afterwards.
void gx_store_free(struct GxStore *s);

// Fits the surrogate on the records of one subset and writes its score
// (negated surrogate loss). `ridge < 0` selects the default.
//
// # Safety
// `s` is a live handle; `subset` holds `len` task ids; `score` is writable.
enum GxStatus gx_estimate(const struct GxStore *s,
                          const size_t *subset,
                          size_t len,
                          double ridge,
                          double *score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRADEX_H */
