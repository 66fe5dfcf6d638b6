#ifndef CL2S_H
#define CL2S_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible function.
 */
typedef enum Cl2sStatus {
  CL2S_STATUS_OK = 0,
  CL2S_STATUS_NULL_POINTER = 1,
  CL2S_STATUS_INVALID_ARGUMENT = 2,
  CL2S_STATUS_UNKNOWN_VARIANT = 3,
  CL2S_STATUS_INVALID_INPUT = 4,
  CL2S_STATUS_IO = 5,
  CL2S_STATUS_INCOMPATIBLE_CHECKPOINT = 6,
  CL2S_STATUS_CHECKPOINT_PARSE = 7,
  CL2S_STATUS_RUNTIME = 8,
  CL2S_STATUS_PANIC = 9,
} Cl2sStatus;

/**
 * Opaque model handle.
 */
typedef struct Cl2sModel Cl2sModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *cl2s_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cl2s_version(void);

/**
 * Builds a freshly initialized model. `variant` is a preset name (e.g.
 * "CL2S") or a comma-separated head list (e.g. "AS,MUL,ADD").
 *
 * # Safety
 * `variant` must be a NUL-terminated string; `out` must be writable.
 */
enum Cl2sStatus cl2s_model_new(const char *variant, uint64_t seed, struct Cl2sModel **out);

/**
 * Loads a checkpoint written by the `cl2s` tool or [`cl2s_model_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum Cl2sStatus cl2s_model_load(const char *path, struct Cl2sModel **out);

/**
 * Writes the model to a checkpoint file.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum Cl2sStatus cl2s_model_save(const struct Cl2sModel *model, const char *path);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void cl2s_model_free(struct Cl2sModel *model);

/**
 * Number of active heads (and attention maps), or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or come from this library.
 */
size_t cl2s_model_head_count(const struct Cl2sModel *model);

/**
 * Dehazes one image. `output` receives `height * width * 3` values. If
 * `attention` is not NULL it receives `head_count * height * width`
 * per-pixel weights, one plane per head in canonical head order.
 *
 * # Safety
 * Buffers must hold the documented number of elements.
 */
enum Cl2sStatus cl2s_model_dehaze(const struct Cl2sModel *model,
                                  const float *input,
                                  size_t height,
                                  size_t width,
                                  float *output,
                                  float *attention);

/**
 * Peak signal-to-noise ratio in dB (peak 1.0); +inf for identical images.
 *
 * # Safety
 * `a` and `b` must hold `height * width * 3` values; `out` must be writable.
 */
enum Cl2sStatus cl2s_psnr(const float *a, const float *b, size_t height, size_t width, double *out);

/**
 * Mean SSIM over the three channels (11×11 Gaussian window, σ = 1.5).
 *
 * # Safety
 * As for [`cl2s_psnr`].
 */
enum Cl2sStatus cl2s_ssim(const float *a, const float *b, size_t height, size_t width, double *out);

/**
 * Mean per-pixel CIEDE2000 colour difference of two sRGB images.
 *
 * # Safety
 * As for [`cl2s_psnr`].
 */
enum Cl2sStatus cl2s_ciede2000_mean(const float *a,
                                    const float *b,
                                    size_t height,
                                    size_t width,
                                    double *out);

/**
 * CIEDE2000 difference of two CIELAB colours given as `{L, a, b}`.
 *
 * # Safety
 * `lab1` and `lab2` must point to three doubles; `out` must be writable.
 */
enum Cl2sStatus cl2s_ciede2000(const double *lab1, const double *lab2, double *out);

/**
 * Renders haze onto a clear image: `I = J·t + A·(1 − t)`, `t = exp(−β·d)`.
 * `depth` holds `height * width` non-negative values; `airlight` holds
 * three values in `[0.7, 1]`.
 *
 * # Safety
 * Buffers must hold the documented number of elements.
 */
enum Cl2sStatus cl2s_synthesize_haze(const float *clear,
                                     const float *depth,
                                     size_t height,
                                     size_t width,
                                     const float *airlight,
                                     float beta,
                                     float *hazy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CL2S_H */
