#ifndef EVADAPT_H
#define EVADAPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EvadaptStatus {
  EVADAPT_STATUS_OK = 0,
  EVADAPT_STATUS_NULL_POINTER = 1,
  EVADAPT_STATUS_INVALID_UTF8 = 2,
  EVADAPT_STATUS_PARSE = 3,
  EVADAPT_STATUS_VALIDATION = 4,
  EVADAPT_STATUS_ARGUMENT = 5,
  EVADAPT_STATUS_CONTRACT = 6,
  EVADAPT_STATUS_CONFIG = 7,
  EVADAPT_STATUS_INGESTION = 8,
  EVADAPT_STATUS_EXPORT = 9,
  EVADAPT_STATUS_NUMERIC_GUARD = 10,
  EVADAPT_STATUS_NON_FINITE = 11,
  EVADAPT_STATUS_CHECKPOINT = 12,
  EVADAPT_STATUS_IO = 13,
  EVADAPT_STATUS_TENSOR = 14,
  EVADAPT_STATUS_BUFFER_TOO_SMALL = 15,
  EVADAPT_STATUS_PANIC = 16,
} EvadaptStatus;

typedef enum EvadaptEventFormat {
  EVADAPT_EVENT_FORMAT_CANONICAL = 0,
  EVADAPT_EVENT_FORMAT_NCALTECH_BIN = 1,
  EVADAPT_EVENT_FORMAT_AEDAT = 2,
} EvadaptEventFormat;

/**
 * Opaque parsed event stream.
 */
typedef struct EvadaptEventStream EvadaptEventStream;

/**
 * Opaque trained model, restored from a checkpoint.
 */
typedef struct EvadaptModel EvadaptModel;

/**
 * One event as seen from C. `polarity` is +1 or -1.
 */
typedef struct EvadaptEvent {
  uint64_t t;
  uint16_t x;
  uint16_t y;
  int8_t polarity;
} EvadaptEvent;

/**
 * Outcome of [`evadapt_train`]. Accuracies are NaN when unavailable.
 */
typedef struct EvadaptTrainSummary {
  uint64_t steps;
  double best_val_acc;
  double test_acc;
} EvadaptTrainSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *evadapt_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length, 0 when none is set.
 */
size_t evadapt_last_error(char *buf, size_t len);

/**
 * Parses an event file held in memory.
 */
enum EvadaptStatus evadapt_event_stream_parse(const uint8_t *bytes,
                                              size_t len,
                                              enum EvadaptEventFormat format,
                                              struct EvadaptEventStream **out);

/**
 * Builds a stream from `n` events on a `width` x `height` sensor.
 */
enum EvadaptStatus evadapt_event_stream_new(const struct EvadaptEvent *events,
                                            size_t n,
                                            uint32_t width,
                                            uint32_t height,
                                            struct EvadaptEventStream **out);

void evadapt_event_stream_free(struct EvadaptEventStream *s);

/**
 * Number of events, 0 for a null handle.
 */
size_t evadapt_event_stream_len(const struct EvadaptEventStream *s);

enum EvadaptStatus evadapt_event_stream_get(const struct EvadaptEventStream *s,
                                            size_t index,
                                            struct EvadaptEvent *out);

/**
 * Voxelizes raw event counts into `out` laid out `(2*bins, height, width)`: positive bins
 * first. `out_len` must be at least `2*bins*height*width`.
 */
enum EvadaptStatus evadapt_event_stream_voxelize(const struct EvadaptEventStream *s,
                                                 size_t height,
                                                 size_t width,
                                                 size_t bins,
                                                 float *out,
                                                 size_t out_len);

/**
 * Relativistic average discriminator loss over score vectors.
 */
enum EvadaptStatus evadapt_relativistic_disc_loss(const double *real,
                                                  size_t n_real,
                                                  const double *fake,
                                                  size_t n_fake,
                                                  double *out);

/**
 * Relativistic average generator loss over score vectors.
 */
enum EvadaptStatus evadapt_relativistic_gen_loss(const double *real,
                                                 size_t n_real,
                                                 const double *fake,
                                                 size_t n_fake,
                                                 double *out);

/**
 * Mean negative cosine similarity between matching rows of two `rows x dim`
 * row-major matrices.
 */
enum EvadaptStatus evadapt_contrastive_loss(const double *a,
                                            const double *b,
                                            size_t rows,
                                            size_t dim,
                                            double *out);

/**
 * Mean absolute cosine similarity between matching rows.
 */
enum EvadaptStatus evadapt_uncorrelated_loss(const double *a,
                                             const double *b,
                                             size_t rows,
                                             size_t dim,
                                             double *out);

/**
 * Trains with the config file at `config_path`; `summary` may be null.
 */
enum EvadaptStatus evadapt_train(const char *config_path, struct EvadaptTrainSummary *summary);

/**
 * Restores a model from a checkpoint manifest (`.json`).
 */
enum EvadaptStatus evadapt_model_load(const char *path, struct EvadaptModel **out);

void evadapt_model_free(struct EvadaptModel *m);

/**
 * Writes the class count and the expected event tensor geometry.
 */
enum EvadaptStatus evadapt_model_shape(const struct EvadaptModel *m,
                                       size_t *classes,
                                       size_t *channels,
                                       size_t *height,
                                       size_t *width);

/**
 * Classifies `n` event tensors stored back to back, each laid out as in
 * [`evadapt_event_stream_voxelize`] and already normalized the way the model
 * was trained, writing one class index per sample.
 */
enum EvadaptStatus evadapt_model_classify_events(const struct EvadaptModel *m,
                                                 const float *data,
                                                 size_t n,
                                                 uint32_t *labels);

/**
 * Voxelizes and normalizes `stream` with the model's data settings, then
 * classifies it.
 */
enum EvadaptStatus evadapt_model_classify_stream(const struct EvadaptModel *m,
                                                 const struct EvadaptEventStream *stream,
                                                 uint32_t *label);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EVADAPT_H */
