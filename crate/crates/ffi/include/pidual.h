#ifndef PIDUAL_H
#define PIDUAL_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PidualMethod {
  PIDUAL_METHOD_CONFIDENCE = 0,
  PIDUAL_METHOD_GATE = 1,
} PidualMethod;

typedef enum PidualStatus {
  PIDUAL_STATUS_OK = 0,
  PIDUAL_STATUS_NULL_POINTER = 1,
  PIDUAL_STATUS_INVALID_ARGUMENT = 2,
  PIDUAL_STATUS_CONFIG = 3,
  PIDUAL_STATUS_PARSE = 4,
  PIDUAL_STATUS_SHAPE = 5,
  PIDUAL_STATUS_CONTRACT = 6,
  PIDUAL_STATUS_NUMERIC = 7,
  PIDUAL_STATUS_SETUP = 8,
  PIDUAL_STATUS_IO = 9,
  PIDUAL_STATUS_PANIC = 10,
} PidualStatus;

/*
 Opaque dataset handle.
 */
typedef struct PidualDataset PidualDataset;

/*
 Opaque handle to a trained model and the PI layout it expects.
 */
typedef struct PidualModel PidualModel;

/*
 Parameters of a random linear design.
 */
typedef struct PidualRiskSetup {
  size_t n;
  size_t d;
  size_t m;
  size_t n_noisy;
  double pi_scale;
  double sigma;
  /*
   Mask entries flipped before fitting the routed estimator.
   */
  size_t flips;
  uint64_t seed;
} PidualRiskSetup;

/*
 Closed-form clean-row risks of OLS and of the routed estimator.
 */
typedef struct PidualRiskComparison {
  double ols_bias;
  double ols_variance;
  double ols_total;
  double routed_bias;
  double routed_variance;
  double routed_total;
  double irreducible;
} PidualRiskComparison;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer
 stays valid until the next failing call on the same thread.
 */
const char *pidual_last_error_message(void);

/*
 Loads a dataset CSV with `num_classes` label values.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PidualStatus pidual_dataset_load_csv(const char *path,
                                          size_t num_classes,
                                          struct PidualDataset **out);

/*
 Builds the dataset described by an experiment config, split as the
 trainer would split it.

 # Safety
 `config_path` must be a NUL-terminated string; `out` must be writable.
 */
enum PidualStatus pidual_dataset_from_config(const char *config_path, struct PidualDataset **out);

/*
 Writes the sample count, feature width and PI width.

 # Safety
 `ds` must be a live handle; each out pointer may be null.
 */
enum PidualStatus pidual_dataset_shape(const struct PidualDataset *ds,
                                       size_t *len,
                                       size_t *feature_dim,
                                       size_t *pi_dim);

/*
 # Safety
 `ds` must be null or a handle not yet freed.
 */
void pidual_dataset_free(struct PidualDataset *ds);

/*
 Loads a checkpoint written by training.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PidualStatus pidual_model_load(const char *path, struct PidualModel **out);

/*
 Writes the number of classes the model predicts.

 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum PidualStatus pidual_model_num_classes(const struct PidualModel *model, size_t *out);

/*
 Class probabilities from the prediction network for one feature row.

 # Safety
 `features` must hold `feature_len` reals and `probs` `probs_len` reals.
 */
enum PidualStatus pidual_model_predict_proba(const struct PidualModel *model,
                                             const double *features,
                                             size_t feature_len,
                                             double *probs,
                                             size_t probs_len);

/*
 # Safety
 `model` must be null or a handle not yet freed.
 */
void pidual_model_free(struct PidualModel *model);

/*
 Wrong-label detection AUC over the train split of `ds`, which must be
 the dataset the model was trained on and carry clean labels.

 # Safety
 Handles must be live; `out` must be writable.
 */
enum PidualStatus pidual_detect_auc(const struct PidualModel *model,
                                    const struct PidualDataset *ds,
                                    enum PidualMethod method,
                                    double *out);

/*
 ROC AUC of `scores` against nonzero entries of `positives`, ties at half.

 # Safety
 Both arrays must hold `n` elements; `out` must be writable.
 */
enum PidualStatus pidual_roc_auc(const double *scores,
                                 const uint8_t *positives,
                                 size_t n,
                                 double *out);

/*
 Builds a random design and compares the two estimators' risks.

 # Safety
 `setup` must be readable and `out` writable.
 */
enum PidualStatus pidual_risk_compare(const struct PidualRiskSetup *setup,
                                      struct PidualRiskComparison *out);

/*
 Runs training from a config and writes the usual artifacts to
 `out_dir`. `workers` of 0 uses every core.

 # Safety
 Both paths must be NUL-terminated strings.
 */
enum PidualStatus pidual_train_from_config(const char *config_path,
                                           const char *out_dir,
                                           size_t workers);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIDUAL_H */
