#ifndef CLEAR_H
#define CLEAR_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  CLEAR_STATUS_OK = 0,
  CLEAR_STATUS_NULL_POINTER = 1,
  CLEAR_STATUS_INVALID_ARGUMENT = 2,
  CLEAR_STATUS_IO = 3,
  CLEAR_STATUS_PARSE = 4,
  CLEAR_STATUS_SHAPE = 5,
  CLEAR_STATUS_NUMERIC = 6,
  CLEAR_STATUS_INTERNAL = 7,
} ClearStatus;

/**
 * A trained backbone, optionally with retrieval heads.
 */
typedef struct ClearModel ClearModel;

/**
 * A parsed attribute schema.
 */
typedef struct ClearSchema ClearSchema;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *clear_last_error(void);

/**
 * Parses a schema from JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
ClearStatus clear_schema_from_json(const char *json, ClearSchema **out);

/**
 * The built-in eight-attribute schema used by the synthetic data.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
ClearStatus clear_schema_default(ClearSchema **out);

/**
 * Number of attributes, or 0 for a null handle.
 *
 * # Safety
 * `schema` must be null or a live handle.
 */
size_t clear_schema_n_attr(const ClearSchema *schema);

/**
 * # Safety
 * `schema` must be null or a handle not yet freed.
 */
void clear_schema_free(ClearSchema *schema);

/**
 * Renders the pseudo-description of an attribute vector. The string is
 * released with `clear_string_free`.
 *
 * # Safety
 * `bits` must point to `n_bits` bytes, each 0 or 1; `out` must be valid.
 */
ClearStatus clear_pseudo_description(const ClearSchema *schema,
                                     const uint8_t *bits,
                                     size_t n_bits,
                                     size_t n_words,
                                     char **out);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void clear_string_free(char *s);

/**
 * Loads a recognition checkpoint and, when `heads_path` is not null, the
 * retrieval heads trained on it. Both must match `schema`.
 *
 * # Safety
 * Paths must be NUL-terminated or (for `heads_path`) null; `out` valid.
 */
ClearStatus clear_model_load(const ClearSchema *schema,
                             const char *par_path,
                             const char *heads_path,
                             ClearModel **out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void clear_model_free(ClearModel *model);

/**
 * Input image height and width. Images are float32, channel-first RGB.
 *
 * # Safety
 * All pointers must be valid.
 */
ClearStatus clear_model_input_size(const ClearModel *model, size_t *height, size_t *width);

/**
 * Length of person and query embeddings, or 0 without retrieval heads.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t clear_model_embed_dim(const ClearModel *model);

/**
 * Attribute probabilities, `batch × n_attr` row-major.
 *
 * # Safety
 * `images` must hold `batch × 3 × height × width` floats and `probs`
 * `probs_len` floats.
 */
ClearStatus clear_model_predict(const ClearModel *model,
                                const float *images,
                                size_t batch,
                                float *probs,
                                size_t probs_len);

/**
 * Unit-norm person embeddings, `batch × embed_dim` row-major.
 *
 * # Safety
 * As for `clear_model_predict`.
 */
ClearStatus clear_model_encode_person(const ClearModel *model,
                                      const float *images,
                                      size_t batch,
                                      float *out,
                                      size_t out_len);

/**
 * Search vector of an attribute query, comparable by dot product with
 * person embeddings. `mode` is "hard", "soft", "word" or "hard+soft".
 *
 * # Safety
 * `bits` must point to `n_bits` bytes; `mode` must be NUL-terminated;
 * `out` must hold `out_len` floats.
 */
ClearStatus clear_model_encode_query(const ClearModel *model,
                                     const uint8_t *bits,
                                     size_t n_bits,
                                     const char *mode,
                                     float *out,
                                     size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLEAR_H */
