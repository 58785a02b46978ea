#ifndef METRIC_FORGE_H
#define METRIC_FORGE_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MfStatus {
  MF_STATUS_OK = 0,
  MF_STATUS_NULL_POINTER = 1,
  MF_STATUS_INVALID_ARGUMENT = 2,
  MF_STATUS_INVALID_CONFIG = 3,
  MF_STATUS_NUMERICAL = 4,
  MF_STATUS_IO = 5,
  MF_STATUS_PARSE = 6,
  MF_STATUS_GRADCHECK_FAILED = 7,
  MF_STATUS_PANIC = 8,
} MfStatus;

typedef enum MfLossKind {
  MF_LOSS_KIND_CONTRASTIVE = 0,
  MF_LOSS_KIND_TRIPLET = 1,
  MF_LOSS_KIND_TRIPLET_COSINE = 2,
  MF_LOSS_KIND_NPAIR = 3,
  MF_LOSS_KIND_MULTI_SIMILARITY = 4,
  MF_LOSS_KIND_NCA = 5,
  MF_LOSS_KIND_PROXYNCA = 6,
  MF_LOSS_KIND_PROXYNCA_PP = 7,
  MF_LOSS_KIND_PROXY_ANCHOR = 8,
  MF_LOSS_KIND_PROXYGML = 9,
} MfLossKind;

/**
 * Labelled embedding rows.
 */
typedef struct MfBatch MfBatch;

/**
 * Class-major proxy vectors.
 */
typedef struct MfProxySet MfProxySet;

/**
 * Loss hyperparameters. Fill with [`mf_loss_params_default`] and adjust.
 */
typedef struct MfLossParams {
  enum MfLossKind kind;
  double contrastive_margin;
  double triplet_margin;
  /**
   * Nonzero selects the exponential-free N-pair form.
   */
  int32_t npair_literal;
  double ms_alpha;
  double ms_beta;
  double ms_lambda;
  double ms_epsilon;
  double temperature;
  double anchor_alpha;
  double anchor_delta;
  size_t gml_k;
  size_t gml_m;
  double gml_lambda;
  /**
   * Direction regularization weight (triplet, multi-similarity, proxynca).
   */
  double gamma;
  /**
   * Nonzero flips the direction term to reward alignment.
   */
  int32_t direction_reward;
  int32_t direction_hinge;
} MfLossParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *mf_last_error_message(void);

/**
 * Copies `rows * cols` values and `rows` labels into a new batch.
 *
 * # Safety
 * `data` and `labels` must point to buffers of the stated lengths and `out`
 * must be writable.
 */
enum MfStatus mf_batch_new(const double *data,
                           size_t rows,
                           size_t cols,
                           const size_t *labels,
                           struct MfBatch **out);

/**
 * # Safety
 * `batch` must come from [`mf_batch_new`] and not be used afterwards.
 */
void mf_batch_free(struct MfBatch *batch);

/**
 * Proxies laid out class-major: rows `c * per_class .. (c + 1) * per_class`
 * belong to class `c`.
 *
 * # Safety
 * `data` must hold `num_classes * per_class * dim` values and `out` must be
 * writable.
 */
enum MfStatus mf_proxies_new(const double *data,
                             size_t num_classes,
                             size_t per_class,
                             size_t dim,
                             struct MfProxySet **out);

/**
 * # Safety
 * `proxies` must come from [`mf_proxies_new`] and not be used afterwards.
 */
void mf_proxies_free(struct MfProxySet *proxies);

struct MfLossParams mf_loss_params_default(enum MfLossKind kind);

/**
 * Loss value and gradients for one batch.
 *
 * `grad_embeddings` (rows x cols of the batch) and `grad_proxies` (rows x
 * dim of the proxy set) may be null when not needed. `proxies` may be null
 * for losses without proxies.
 *
 * # Safety
 * Handles must be live; gradient buffers, when given, must have the sizes
 * above.
 */
enum MfStatus mf_loss_compute(const struct MfLossParams *params,
                              const struct MfBatch *batch,
                              const struct MfProxySet *proxies,
                              double *out_value,
                              double *grad_embeddings,
                              double *grad_proxies);

/**
 * Cosine recall@k over the batch.
 *
 * # Safety
 * `batch` must be live and `out` writable.
 */
enum MfStatus mf_recall_at_k(const struct MfBatch *batch, size_t k, double *out);

/**
 * Runs the built-in gradient check on seeds `0..seeds`. Writes the number
 * of failing checks to `out_failed` and returns `GradcheckFailed` if it is
 * nonzero.
 *
 * # Safety
 * `out_failed` must be writable or null.
 */
enum MfStatus mf_gradcheck(uint64_t seeds, double tolerance, size_t *out_failed);

/**
 * Trains from a JSON run configuration and returns a JSON document with
 * the history and the initial and final retrieval reports. No files are
 * written. Free the result with [`mf_string_free`].
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out_json` writable.
 */
enum MfStatus mf_train_json(const char *config_json, char **out_json);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void mf_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METRIC_FORGE_H */
