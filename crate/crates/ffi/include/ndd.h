/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef NDD_H
#define NDD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NddDivergence {
  NDD_DIVERGENCE_HELLINGER = 0,
  NDD_DIVERGENCE_KL = 1,
} NddDivergence;

typedef enum NddWeighting {
  NDD_WEIGHTING_MEAN = 0,
  NDD_WEIGHTING_EXPONENTIAL = 1,
} NddWeighting;

typedef enum NddStatus {
  NDD_STATUS_OK = 0,
  NDD_STATUS_INVALID_ARGUMENT = 1,
  NDD_STATUS_NULL_POINTER = 2,
  NDD_STATUS_UTF8 = 3,
  NDD_STATUS_BACKEND = 4,
  NDD_STATUS_UNSUPPORTED = 5,
  NDD_STATUS_NO_NEIGHBORS = 6,
  NDD_STATUS_EMPTY_BANK = 7,
  NDD_STATUS_IO = 8,
  NDD_STATUS_DATA = 9,
  NDD_STATUS_PANIC = 10,
} NddStatus;

/**
 * Opaque model handle.
 */
typedef struct NddBackend NddBackend;

/**
 * Scoring options. Start from [`ndd_options_default`].
 */
typedef struct NddOptions {
  enum NddDivergence divergence;
  enum NddWeighting weighting;
  /**
   * Decay for exponential weighting, in (0, 1].
   */
  double mu;
  double epsilon;
  double ensemble_ratio;
} NddOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Default scoring options: Hellinger, mean weighting.
 */
struct NddOptions ndd_options_default(void);

/**
 * Message of the last failed call on this thread, or "". Valid until the
 * next call into the library on the same thread.
 */
const char *ndd_last_error(void);

/**
 * Builds the in-process count model from a corpus, one sentence per line.
 *
 * # Safety
 * `corpus` must be a NUL-terminated string; `out` must be writable.
 */
enum NddStatus ndd_backend_new_reference(const char *corpus,
                                         double alpha,
                                         size_t top_k,
                                         struct NddBackend **out);

/**
 * Spawns `command` through the shell and talks the line protocol with it.
 *
 * # Safety
 * `command` must be a NUL-terminated string; `out` must be writable.
 */
enum NddStatus ndd_backend_spawn(const char *command, size_t top_k, struct NddBackend **out);

/**
 * # Safety
 * `backend` must be null or a handle from this library, not yet freed.
 */
void ndd_backend_free(struct NddBackend *backend);

/**
 * NDD of replacing whitespace tokens `[start, end)` of `sentence` with the
 * tokens of `replacement`. `opts` may be null for defaults.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum NddStatus ndd_score_edit(const struct NddBackend *backend,
                              const char *sentence,
                              size_t start,
                              size_t end,
                              const char *replacement,
                              const struct NddOptions *opts,
                              double *out);

/**
 * NDD between two sentences, aligned on their longest common subsequence.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum NddStatus ndd_score_pair(const struct NddBackend *backend,
                              const char *original,
                              const char *edited,
                              const struct NddOptions *opts,
                              double *out);

/**
 * Pseudo-perplexity of a sentence, floored at `epsilon`.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum NddStatus ndd_perplexity(const struct NddBackend *backend,
                              const char *sentence,
                              double epsilon,
                              double *out);

/**
 * Longest-common-subsequence length over the shorter token count.
 *
 * # Safety
 * Strings must be NUL-terminated; `out` writable.
 */
enum NddStatus ndd_overlap_ratio(const char *a, const char *b, double *out);

/**
 * Generatively rewrites tokens `[start, end)` of `sentence`. `config_json`
 * is a JSON distortion config or null for defaults. On success `*out_json`
 * holds the span outcome as JSON, to be freed with [`ndd_string_free`].
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated; `label` may be null.
 */
enum NddStatus ndd_distort_span(const struct NddBackend *backend,
                                const char *sentence,
                                size_t start,
                                size_t end,
                                const char *label,
                                const char *config_json,
                                char **out_json);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void ndd_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NDD_H */
