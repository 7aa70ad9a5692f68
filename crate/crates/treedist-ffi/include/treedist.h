#ifndef TREEDIST_H
#define TREEDIST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum TreedistStatus {
  TREEDIST_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  TREEDIST_STATUS_NULL_ARGUMENT = 1,
  /**
   * Input failed parsing or a consistency check.
   */
  TREEDIST_STATUS_INVALID_INPUT = 2,
  /**
   * A solver could not produce an optimum.
   */
  TREEDIST_STATUS_SOLVER_FAILURE = 3,
  /**
   * The trees or the metric disagree on the number of stages.
   */
  TREEDIST_STATUS_STAGE_MISMATCH = 4,
  /**
   * Stagewise independence was required but does not hold.
   */
  TREEDIST_STATUS_NOT_SWI = 5,
  /**
   * Unexpected internal failure.
   */
  TREEDIST_STATUS_INTERNAL = 6,
} TreedistStatus;

/**
 * Opaque metric handle.
 */
typedef struct TreedistMetric TreedistMetric;

/**
 * Opaque scenario tree handle.
 */
typedef struct TreedistTree TreedistTree;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; do not free.
 */
const char *treedist_version(void);

/**
 * Message for the most recent failure on this thread, or null if the last
 * call succeeded. The pointer is invalidated by the next treedist call on
 * the same thread; do not free.
 */
const char *treedist_last_error(void);

/**
 * # Safety
 * `s` must be a string returned by this library's allocating functions
 * (such as [`treedist_tree_to_json`]) and not yet freed.
 */
void treedist_string_free(char *s);

/**
 * Parses a tree from its JSON document. On success writes a handle to
 * `out`; free it with [`treedist_tree_free`]. Structure is checked here,
 * probability mass by [`treedist_tree_validate`].
 *
 * # Safety
 * `json` must point to a NUL-terminated string; `out` must be a valid
 * writable pointer.
 */
enum TreedistStatus treedist_tree_parse(const char *json, struct TreedistTree **out);

/**
 * # Safety
 * `tree` must be a handle from [`treedist_tree_parse`] or
 * [`treedist_product`], not yet freed.
 */
void treedist_tree_free(struct TreedistTree *tree);

/**
 * Number of stages, or 0 for a null handle.
 *
 * # Safety
 * `tree` must be null or a live handle from this library.
 */
uintptr_t treedist_tree_stages(const struct TreedistTree *tree);

/**
 * Number of nodes, or 0 for a null handle.
 *
 * # Safety
 * `tree` must be null or a live handle from this library.
 */
uintptr_t treedist_tree_node_count(const struct TreedistTree *tree);

/**
 * Number of leaves, or 0 for a null handle.
 *
 * # Safety
 * `tree` must be null or a live handle from this library.
 */
uintptr_t treedist_tree_leaf_count(const struct TreedistTree *tree);

/**
 * Checks probability mass consistency within `tol`.
 *
 * # Safety
 * `tree` must be a live handle from this library.
 */
enum TreedistStatus treedist_tree_validate(const struct TreedistTree *tree, double tol);

/**
 * Serializes a tree to its JSON document. Free the returned string with
 * [`treedist_string_free`]; null for a null handle.
 *
 * # Safety
 * `tree` must be null or a live handle from this library.
 */
char *treedist_tree_to_json(const struct TreedistTree *tree);

/**
 * Creates a metric: order `p`, one positive weight per stage, ground 0 for
 * Euclidean or 1 for absolute difference. Free with
 * [`treedist_metric_free`].
 *
 * # Safety
 * `weights` must point to `stages` readable doubles; `out` must be a valid
 * writable pointer.
 */
enum TreedistStatus treedist_metric_create(double p,
                                           const double *weights,
                                           uintptr_t stages,
                                           int ground,
                                           struct TreedistMetric **out);

/**
 * # Safety
 * `metric` must be a handle from [`treedist_metric_create`], not yet
 * freed.
 */
void treedist_metric_free(struct TreedistMetric *metric);

/**
 * Nested distance between two trees. `method`: 0 picks the stagewise fast
 * path when both trees qualify and the backward recursion otherwise, 1
 * forces the monolithic linear program, 2 the recursion, 3 the fast path.
 * Writes the p-power value and its p-th root.
 *
 * # Safety
 * `a`, `b`, `metric` must be live handles from this library; `value_p` and
 * `value_root` must be valid writable pointers.
 */
enum TreedistStatus treedist_nested(const struct TreedistTree *a,
                                    const struct TreedistTree *b,
                                    const struct TreedistMetric *metric,
                                    int method,
                                    double *value_p,
                                    double *value_root);

/**
 * Wasserstein distance (p-power) between two discrete distributions given
 * as flat row-major point arrays. `ground` is 0 for Euclidean, 1 for
 * absolute difference.
 *
 * # Safety
 * `p_points` must hold `p_len * dimension` doubles and `p_probs` `p_len`
 * doubles; likewise for `q_*`; `value_p` must be a valid writable pointer.
 */
enum TreedistStatus treedist_wasserstein(const double *p_points,
                                         const double *p_probs,
                                         uintptr_t p_len,
                                         const double *q_points,
                                         const double *q_probs,
                                         uintptr_t q_len,
                                         uintptr_t dimension,
                                         double order,
                                         int ground,
                                         double *value_p);

/**
 * Attaches `b` below every leaf of `a`, multiplying probabilities. The new
 * handle must be freed with [`treedist_tree_free`].
 *
 * # Safety
 * `a` and `b` must be live handles from this library; `out` must be a
 * valid writable pointer.
 */
enum TreedistStatus treedist_product(const struct TreedistTree *a,
                                     const struct TreedistTree *b,
                                     struct TreedistTree **out);

/**
 * Tests stagewise independence with tolerance `tol` on conditional
 * probabilities. Returns `Ok` when independent, `NotSwi` with a violation
 * message otherwise.
 *
 * # Safety
 * `tree` must be a live handle from this library.
 */
enum TreedistStatus treedist_detect_swi(const struct TreedistTree *tree, double tol);

/**
 * Reduces the per-stage supports of a stagewise independent specification
 * (JSON document in the spec file format) to `targets`. Writes the reduced
 * specification as JSON to `out_json` (free with
 * [`treedist_string_free`]) and the weighted distance to `total_p`.
 *
 * # Safety
 * `spec_json` must point to a NUL-terminated string; `targets` must hold
 * `n_targets` readable values; `metric` must be a live handle; `out_json`
 * and `total_p` must be valid writable pointers.
 */
enum TreedistStatus treedist_reduce(const char *spec_json,
                                    const uintptr_t *targets,
                                    uintptr_t n_targets,
                                    const struct TreedistMetric *metric,
                                    uint64_t seed,
                                    char **out_json,
                                    double *total_p);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* TREEDIST_H */
