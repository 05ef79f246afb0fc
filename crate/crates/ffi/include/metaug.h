#ifndef METAUG_H
#define METAUG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Feature source for probing.
typedef enum MetaugSource {
  METAUG_SOURCE_H = 0,
  METAUG_SOURCE_Z = 1,
  METAUG_SOURCE_Z_PLUS_AUG = 2,
} MetaugSource;

typedef enum MetaugStatus {
  METAUG_STATUS_OK = 0,
  METAUG_STATUS_NULL_POINTER = 1,
  METAUG_STATUS_INVALID_ARGUMENT = 2,
  METAUG_STATUS_CONFIG = 3,
  METAUG_STATUS_MISSING_ARTIFACT = 4,
  METAUG_STATUS_DIVERGENCE = 5,
  METAUG_STATUS_IO = 6,
  METAUG_STATUS_PANIC = 7,
} MetaugStatus;

// A run configuration.
typedef struct MetaugConfig MetaugConfig;

// Trained or loaded model parameters.
typedef struct MetaugModel MetaugModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next call on this thread.
const char *metaug_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *metaug_version(void);

// # Safety
// `s` must be NULL or a string returned by this library.
void metaug_string_free(char *s);

// Default configuration.
//
// # Safety
// `out` must be a valid pointer.
enum MetaugStatus metaug_config_new(struct MetaugConfig **out);

// Configuration from a JSON document; missing keys take their defaults.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum MetaugStatus metaug_config_from_json(const char *json, struct MetaugConfig **out);

// Set the dotted `key` to `value` (JSON, or a bare string).
//
// # Safety
// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
enum MetaugStatus metaug_config_set(struct MetaugConfig *cfg, const char *key, const char *value);

// The fully resolved configuration as JSON.
//
// # Safety
// `cfg` must be a live handle and `out` a valid pointer.
enum MetaugStatus metaug_config_to_json(const struct MetaugConfig *cfg, char **out);

// # Safety
// `cfg` must be NULL or a handle from this library, not used afterwards.
void metaug_config_free(struct MetaugConfig *cfg);

// Train with `cfg`. When `run_dir` is not NULL the metric log, config and
// checkpoints are written there.
//
// # Safety
// `cfg` must be a live handle, `run_dir` NULL or a NUL-terminated string,
// `out` a valid pointer.
enum MetaugStatus metaug_train(const struct MetaugConfig *cfg,
                               const char *run_dir,
                               struct MetaugModel **out);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum MetaugStatus metaug_model_load(const char *path, struct MetaugModel **out);

// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum MetaugStatus metaug_model_save(const struct MetaugModel *model, const char *path);

// # Safety
// `model` must be NULL or a handle from this library, not used afterwards.
void metaug_model_free(struct MetaugModel *model);

// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum MetaugStatus metaug_model_num_views(const struct MetaugModel *model, size_t *out);

// Input width of `view`.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum MetaugStatus metaug_model_input_dim(const struct MetaugModel *model, size_t view, size_t *out);

// Width of the representation `h` of `view`.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum MetaugStatus metaug_model_representation_dim(const struct MetaugModel *model,
                                                  size_t view,
                                                  size_t *out);

// Width of the projected feature `z` of `view`.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum MetaugStatus metaug_model_feature_dim(const struct MetaugModel *model,
                                           size_t view,
                                           size_t *out);

// Representations `h` of `rows` row-major inputs of `view`.
//
// # Safety
// `input` must hold `rows * input_dim` values and `output` `output_len` values.
enum MetaugStatus metaug_model_encode(const struct MetaugModel *model,
                                      size_t view,
                                      const double *input,
                                      size_t rows,
                                      double *output,
                                      size_t output_len);

// Unit projected features `z` of `rows` row-major inputs of `view`.
//
// # Safety
// `input` must hold `rows * input_dim` values and `output` `output_len` values.
enum MetaugStatus metaug_model_project(const struct MetaugModel *model,
                                       size_t view,
                                       const double *input,
                                       size_t rows,
                                       double *output,
                                       size_t output_len);

// Linear-probe test accuracy of `model` on the dataset named by `cfg`.
//
// # Safety
// `model` and `cfg` must be live handles and `out` a valid pointer.
enum MetaugStatus metaug_model_probe(const struct MetaugModel *model,
                                     const struct MetaugConfig *cfg,
                                     enum MetaugSource source,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METAUG_H */
