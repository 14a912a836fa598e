#ifndef SSLAB_H
#define SSLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum SslStatus {
  SSL_STATUS_OK = 0,
  SSL_STATUS_NULL_POINTER = 1,
  SSL_STATUS_INVALID_ARGUMENT = 2,
  SSL_STATUS_SHAPE_MISMATCH = 3,
  SSL_STATUS_NON_FINITE = 4,
  SSL_STATUS_IO = 5,
  SSL_STATUS_FORMAT = 6,
  SSL_STATUS_UNDEFINED_BIAS = 7,
  SSL_STATUS_BUFFER_TOO_SMALL = 8,
  SSL_STATUS_PANIC = 9,
} SslStatus;

// Top-K variant selector.
typedef enum SslVariant {
  SSL_VARIANT_HARD = 0,
  SSL_VARIANT_MEAN_REPLACEMENT = 1,
} SslVariant;

// Trained classifier loaded from an SSLM checkpoint.
typedef struct SslModel SslModel;

// Dense f64 tensor.
typedef struct SslTensor SslTensor;

// Cue-conflict decision counts and bias ratios.
typedef struct SslBiasReport {
  size_t n_total;
  size_t n_correct_shape;
  size_t n_correct_texture;
  size_t n_other;
  double shape_bias;
  double texture_bias;
} SslBiasReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `cap - 1` bytes). Returns the full message length in bytes.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
size_t ssl_last_error_message(char *buf, size_t cap);

// Creates a tensor from `rank` extents and `prod(shape)` row-major values.
//
// # Safety
// `shape` must point to `rank` values, `data` to `prod(shape)` values and
// `out` to writable handle storage.
enum SslStatus ssl_tensor_new(const size_t *shape,
                              size_t rank,
                              const double *data,
                              struct SslTensor **out);

// Releases a tensor. Null is ignored.
//
// # Safety
// `t` must be null or a live handle from this library.
void ssl_tensor_free(struct SslTensor *t);

// Number of dimensions, or 0 for a null handle.
//
// # Safety
// `t` must be null or a live handle.
size_t ssl_tensor_rank(const struct SslTensor *t);

// Number of elements, or 0 for a null handle.
//
// # Safety
// `t` must be null or a live handle.
size_t ssl_tensor_numel(const struct SslTensor *t);

// Copies the extents into `out` (capacity `cap`).
//
// # Safety
// `t` must be a live handle and `out` point to `cap` writable values.
enum SslStatus ssl_tensor_shape(const struct SslTensor *t, size_t *out, size_t cap);

// Copies the values into `out` (capacity `cap`).
//
// # Safety
// `t` must be a live handle and `out` point to `cap` writable values.
enum SslStatus ssl_tensor_data(const struct SslTensor *t, double *out, size_t cap);

// Kept count per channel: `max(1, ceil(fraction·h·w))`.
//
// # Safety
// `out` must point to writable storage.
enum SslStatus ssl_resolve_k(double fraction, size_t h, size_t w, size_t *out);

// Per-channel spatial Top-K of a `[c,h,w]` or `[n,c,h,w]` tensor. Writes
// the sparsified tensor and a 0/1 mask of the same shape.
//
// # Safety
// `x` must be a live handle; `out_y` and `out_mask` writable handle storage.
enum SslStatus ssl_topk_forward(const struct SslTensor *x,
                                double fraction,
                                enum SslVariant variant,
                                struct SslTensor **out_y,
                                struct SslTensor **out_mask);

// Normalized Gram matrix `(1/(h·w))·X·Xᵀ` of a `[c,h,w]` tensor.
//
// # Safety
// `x` must be a live handle; `out` writable handle storage.
enum SslStatus ssl_gram(const struct SslTensor *x, struct SslTensor **out);

// Largest 4-connected component of a binary `h×w` plane (nonzero bytes
// are set) divided by the number of set cells.
//
// # Safety
// `bits` must point to `h·w` bytes; `out` to writable storage.
enum SslStatus ssl_connectivity(const uint8_t *bits, size_t h, size_t w, double *out);

// Shape/texture bias of `n` cue-conflict predictions.
//
// # Safety
// The three arrays must hold `n` values; `out` must be writable.
enum SslStatus ssl_bias_scores(const size_t *preds,
                               const size_t *shape_labels,
                               const size_t *texture_labels,
                               size_t n,
                               struct SslBiasReport *out);

// Loads an SSLM checkpoint from a NUL-terminated UTF-8 path.
//
// # Safety
// `path` must be a valid C string; `out` writable handle storage.
enum SslStatus ssl_model_load(const char *path, struct SslModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `m` must be null or a live handle from `ssl_model_load`.
void ssl_model_free(struct SslModel *m);

// Input side length expected by the model, or 0 for a null handle.
//
// # Safety
// `m` must be null or a live handle.
size_t ssl_model_image_size(const struct SslModel *m);

// Predicted class of each image in an `[n, 3, S, S]` tensor (values in
// `[0, 1]`), written to `out` (capacity `cap`).
//
// # Safety
// `m` and `images` must be live handles; `out` must point to `cap` values.
enum SslStatus ssl_model_classify(const struct SslModel *m,
                                  const struct SslTensor *images,
                                  size_t *out,
                                  size_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSLAB_H */
