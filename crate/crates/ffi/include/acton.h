#ifndef ACTON_H
#define ACTON_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum ActonStatus {
  ACTON_STATUS_OK = 0,
  ACTON_STATUS_NULL_ARGUMENT = 1,
  ACTON_STATUS_INVALID_ARGUMENT = 2,
  ACTON_STATUS_IO = 3,
  ACTON_STATUS_FORMAT = 4,
  ACTON_STATUS_COMPUTE = 5,
  ACTON_STATUS_BUFFER_TOO_SMALL = 6,
  ACTON_STATUS_PANIC = 7,
} ActonStatus;

// Feature space selector.
typedef enum ActonSpace {
  ACTON_SPACE_PROJECTION = 0,
  ACTON_SPACE_HIDDEN = 1,
  ACTON_SPACE_RAW = 2,
} ActonSpace;

// Acton lexicon (cluster centroids).
typedef struct ActonLexicon ActonLexicon;

// Trained embedding network.
typedef struct ActonModel ActonModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call on the same thread.
const char *acton_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *acton_version(void);

// Loads a checkpoint into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum ActonStatus acton_model_load(const char *path, struct ActonModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must come from [`acton_model_load`] and not be used afterwards.
void acton_model_free(struct ActonModel *model);

// Width of the per-frame features of `space`, or 0 for a null model.
//
// # Safety
// `model` must be null or a live handle.
size_t acton_model_feature_dim(const struct ActonModel *model, enum ActonSpace space);

// Per-frame features of a `frames x joints x 3` sequence written to `out`
// (`frames x dim`, see [`acton_model_feature_dim`]). `model` may be null for
// [`ActonSpace::Raw`], whose features are the center-normalized joints.
//
// # Safety
// `data` must hold `frames * joints * 3` values and `out` `out_len` values.
enum ActonStatus acton_embed(const struct ActonModel *model,
                             enum ActonSpace space,
                             const double *data,
                             size_t frames,
                             size_t joints,
                             double fps,
                             double *out,
                             size_t out_len);

// Loads a lexicon into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum ActonStatus acton_lexicon_load(const char *path, struct ActonLexicon **out);

// Releases a lexicon; null is ignored.
//
// # Safety
// `lexicon` must come from [`acton_lexicon_load`] and not be used afterwards.
void acton_lexicon_free(struct ActonLexicon *lexicon);

// Number of actons, or 0 for a null lexicon.
//
// # Safety
// `lexicon` must be null or a live handle.
size_t acton_lexicon_size(const struct ActonLexicon *lexicon);

// Acton id of every frame (`frames` entries) using the lexicon's own
// feature space. `model` may be null for raw-space lexicons.
//
// # Safety
// `data` must hold `frames * joints * 3` values and `labels_out` `frames`.
enum ActonStatus acton_tokenize(const struct ActonModel *model,
                                const struct ActonLexicon *lexicon,
                                const double *data,
                                size_t frames,
                                size_t joints,
                                double fps,
                                uint32_t *labels_out);

// Kendall's Tau of nearest-neighbour retrieval from `a` (`rows_a x dim`)
// into `b` (`rows_b x dim`).
//
// # Safety
// `a`, `b` must hold `rows * dim` values; `out` must be writable.
enum ActonStatus acton_kendalls_tau(const double *a,
                                    size_t rows_a,
                                    const double *b,
                                    size_t rows_b,
                                    size_t dim,
                                    double *out);

// Normalized mutual information (bits) between two labelings of `n` frames.
//
// # Safety
// `truth` and `clusters` must hold `n` values; `out` must be writable.
enum ActonStatus acton_nmi(const uint32_t *truth, const uint32_t *clusters, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACTON_H */
