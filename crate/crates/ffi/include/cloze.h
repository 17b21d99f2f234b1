#ifndef CLOZE_H
#define CLOZE_H

/* Generated by cbindgen from crates/ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Scoring objectives exposed over the ABI.
enum ClozeObjective
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  // Every position scored from both sides through the combination layer.
  CLOZE_OBJECTIVE_CLOZE = 0,
  // Forward and backward next-token losses from the towers alone.
  CLOZE_OBJECTIVE_BILM = 1,
};
#ifndef __cplusplus
typedef int32_t ClozeObjective;
#endif // __cplusplus

// Loaded model plus the codec it was trained with.
typedef struct ClozeModel ClozeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Load a checkpoint directory containing `config.txt`, `params.manifest`,
// `params.bin`, `vocab.txt` and, for subword models, `codes.txt`. On
// success writes a handle to `out`; release it with [`cloze_model_free`].
//
// # Safety
// `dir` must be a NUL-terminated string; `out` must be a valid pointer.
int32_t cloze_model_load(const char *dir, struct ClozeModel **out);

// Release a handle returned by [`cloze_model_load`]. Null is a no-op.
//
// # Safety
// `handle` must be a pointer previously returned by [`cloze_model_load`]
// that has not been freed yet.
void cloze_model_free(struct ClozeModel *handle);

// Number of vocabulary types (reserved markers included), or -1 on null.
//
// # Safety
// `handle` must be a live handle or null.
int64_t cloze_vocab_size(const struct ClozeModel *handle);

// Tokenize one whitespace-separated line into vocabulary ids (no boundary
// markers added). Always writes the id count to `out_len`; copies into
// `out_ids` only when `cap` suffices, otherwise returns `BufferTooSmall`.
// Call with `cap == 0` to query the required size.
//
// # Safety
// `handle` and `line` must be valid; `out_ids` must point to at least
// `cap` writable elements (it may be null when `cap` is 0); `out_len`
// must be a valid pointer.
int32_t cloze_tokenize(const struct ClozeModel *handle,
                       const char *line,
                       uint32_t *out_ids,
                       size_t cap,
                       size_t *out_len);

// Score one line under an objective. Writes the summed negative
// log-likelihood and the number of scored predictions; perplexity is
// `exp(nll_sum / tokens)`. The line is wrapped in boundary markers the
// same way training examples are. Bilm counts each position twice (once
// per direction).
//
// # Safety
// `handle` and `line` must be valid; `out_nll_sum` and `out_tokens` must
// be valid pointers.
int32_t cloze_score_line(const struct ClozeModel *handle,
                         const char *line,
                         ClozeObjective objective,
                         double *out_nll_sum,
                         size_t *out_tokens);

// Copy the calling thread's most recent error message (NUL-terminated)
// into `buf` and return the full message length in bytes excluding the
// NUL. When `cap` is too small the message is truncated but still
// NUL-terminated; call with `cap == 0` to query the length.
//
// # Safety
// `buf` must point to at least `cap` writable bytes, or be null when
// `cap` is 0.
size_t cloze_last_error(char *buf, size_t cap);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* CLOZE_H */
