#ifndef DCLS_H
#define DCLS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum DclsStatus {
  DCLS_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  DCLS_STATUS_NULL_POINTER = 1,
  /**
   * An argument was out of range or not valid UTF-8.
   */
  DCLS_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A file could not be read or written.
   */
  DCLS_STATUS_IO = 3,
  /**
   * A file was read but its contents are malformed.
   */
  DCLS_STATUS_FORMAT = 4,
  /**
   * Input or output buffer sizes do not match the model.
   */
  DCLS_STATUS_SHAPE = 5,
  /**
   * The library panicked; the handle arguments should be discarded.
   */
  DCLS_STATUS_PANIC = 6,
} DclsStatus;

/**
 * Trained or freshly initialized model.
 */
typedef struct DclsModel DclsModel;

/**
 * Normalized log-mel spectrogram of shape 1 × mels × frames.
 */
typedef struct DclsSpectrogram DclsSpectrogram;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the message of the calling thread's last failure into `buf`
 * (NUL-terminated, truncated to `len` bytes). Returns the full message
 * length excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t dcls_last_error(char *buf, size_t len);

/**
 * Builds a preset (`"mini"` or `"convnext-t"`) with the given depthwise
 * method (`"dsc7"`, `"dcls"`, `"dcls:S:M:gauss"`, ...). `classes` 0 keeps
 * the preset's class count.
 *
 * # Safety
 * `preset` and `conv` must be NUL-terminated strings; `out` must be a
 * valid pointer.
 */
enum DclsStatus dcls_model_new(const char *preset,
                               const char *conv,
                               uint32_t classes,
                               uint64_t seed,
                               struct DclsModel **out);

/**
 * Reads a checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum DclsStatus dcls_model_load(const char *path, struct DclsModel **out);

/**
 * Writes a checkpoint recording `seed` in its metadata.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum DclsStatus dcls_model_save(const struct DclsModel *model, const char *path, uint64_t seed);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void dcls_model_free(struct DclsModel *model);

/**
 * Total parameter count (shared positions and sigmas counted once).
 *
 * # Safety
 * `model` must be a live handle; `out` must be a valid pointer.
 */
enum DclsStatus dcls_model_param_count(const struct DclsModel *model, uint64_t *out);

/**
 * Parameters of the depthwise spatial convolutions, biases excluded.
 *
 * # Safety
 * `model` must be a live handle; `out` must be a valid pointer.
 */
enum DclsStatus dcls_model_depthwise_weight_count(const struct DclsModel *model, uint64_t *out);

/**
 * Number of output classes.
 *
 * # Safety
 * `model` must be a live handle; `out` must be a valid pointer.
 */
enum DclsStatus dcls_model_num_classes(const struct DclsModel *model, uint32_t *out);

/**
 * Eval-mode logits for `batch` spectrograms of `mels × frames`, stored
 * contiguously in `input`. `logits` receives `batch × classes` values.
 *
 * # Safety
 * `input` must point to `batch·mels·frames` floats and `logits` to
 * `logits_len` writable floats.
 */
enum DclsStatus dcls_model_predict(const struct DclsModel *model,
                                   const float *input,
                                   size_t batch,
                                   size_t mels,
                                   size_t frames,
                                   float *logits,
                                   size_t logits_len);

/**
 * Replaces every 7×7 depthwise convolution by DCLS (`version` 0 = gauss,
 * 1 = bilinear) and returns the converted model as a new handle. The
 * number of replaced layers is written to `replaced` when non-null.
 *
 * # Safety
 * `model` must be a live handle; `out` must be a valid pointer;
 * `replaced` must be null or valid.
 */
enum DclsStatus dcls_model_surgery(const struct DclsModel *model,
                                   uint32_t dilated_size,
                                   uint32_t kernel_count,
                                   uint32_t version,
                                   uint64_t seed,
                                   struct DclsModel **out,
                                   uint32_t *replaced);

/**
 * Log-mel spectrogram of mono samples at `sample_rate`. Other rates than
 * 32 kHz are rejected unless `resample` is true.
 *
 * # Safety
 * `samples` must point to `len` floats; `out` must be a valid pointer.
 */
enum DclsStatus dcls_spectrogram_new(const float *samples,
                                     size_t len,
                                     uint32_t sample_rate,
                                     bool resample,
                                     struct DclsSpectrogram **out);

/**
 * Log-mel spectrogram of a WAV file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum DclsStatus dcls_spectrogram_from_wav(const char *path,
                                          bool resample,
                                          struct DclsSpectrogram **out);

/**
 * Mel bands and frames of a spectrogram.
 *
 * # Safety
 * `spec` must be a live handle; `mels` and `frames` must be valid.
 */
enum DclsStatus dcls_spectrogram_dims(const struct DclsSpectrogram *spec,
                                      size_t *mels,
                                      size_t *frames);

/**
 * Copies the mel-major values into `buf`, which must hold exactly
 * `mels × frames` floats.
 *
 * # Safety
 * `spec` must be a live handle; `buf` must point to `len` writable floats.
 */
enum DclsStatus dcls_spectrogram_copy(const struct DclsSpectrogram *spec, float *buf, size_t len);

/**
 * Releases a spectrogram. Null is ignored.
 *
 * # Safety
 * `spec` must be null or a handle not yet freed.
 */
void dcls_spectrogram_free(struct DclsSpectrogram *spec);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DCLS_H */
