#ifndef FEWSHOT_PERSONA_H
#define FEWSHOT_PERSONA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FspSplit {
  FSP_SPLIT_TRAIN = 0,
  FSP_SPLIT_VALID = 1,
  FSP_SPLIT_TEST = 2,
} FspSplit;

typedef enum FspStatus {
  FSP_STATUS_OK = 0,
  FSP_STATUS_NULL_POINTER = 1,
  FSP_STATUS_INVALID_UTF8 = 2,
  FSP_STATUS_CONFIG = 3,
  FSP_STATUS_IO = 4,
  FSP_STATUS_FORMAT = 5,
  FSP_STATUS_INCOMPATIBLE = 6,
  FSP_STATUS_NUMERIC = 7,
  FSP_STATUS_DATA = 8,
  FSP_STATUS_PANIC = 9,
} FspStatus;

/**
 * A loaded or generated conversation corpus.
 */
typedef struct FspCorpus FspCorpus;

/**
 * Trained parameters plus the configuration that produced them.
 */
typedef struct FspModel FspModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Owned by the
 * library and valid until the next call on the same thread.
 */
const char *fsp_last_error(void);

/**
 * Library version as a static string.
 */
const char *fsp_version(void);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void fsp_string_free(char *s);

/**
 * Generates the synthetic corpus described by a JSON run configuration
 * (null for the defaults).
 *
 * # Safety
 * `config_json` must be null or a nul-terminated string; `out` must be
 * writable.
 */
enum FspStatus fsp_corpus_generate(const char *config_json, struct FspCorpus **out);

/**
 * # Safety
 * `dir` must be a nul-terminated path; `out` must be writable.
 */
enum FspStatus fsp_corpus_load(const char *dir, struct FspCorpus **out);

/**
 * # Safety
 * `corpus` must be a live handle and `dir` a nul-terminated path.
 */
enum FspStatus fsp_corpus_save(const struct FspCorpus *corpus, const char *dir);

/**
 * Content hash of the corpus as a hex string.
 *
 * # Safety
 * `corpus` must be a live handle; `out` must be writable.
 */
enum FspStatus fsp_corpus_hash(const struct FspCorpus *corpus, char **out);

/**
 * # Safety
 * `corpus` must come from this library or be null, and is not used again.
 */
void fsp_corpus_free(struct FspCorpus *corpus);

/**
 * Meta-trains a model on the corpus with a JSON run configuration (null
 * for the defaults).
 *
 * # Safety
 * `corpus` must be a live handle, `config_json` null or nul-terminated,
 * `out` writable.
 */
enum FspStatus fsp_train(const struct FspCorpus *corpus,
                         const char *config_json,
                         struct FspModel **out);

/**
 * # Safety
 * `path` must be a nul-terminated path; `out` must be writable.
 */
enum FspStatus fsp_model_load(const char *path, struct FspModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a nul-terminated path.
 */
enum FspStatus fsp_model_save(const struct FspModel *model, const char *path);

/**
 * SHA-256 over all learned parameters, as hex.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum FspStatus fsp_model_checksum(const struct FspModel *model, char **out);

/**
 * # Safety
 * `model` must come from this library or be null, and is not used again.
 */
void fsp_model_free(struct FspModel *model);

/**
 * Adapts to every speaker of `split` and writes the evaluation as JSON.
 * Refuses a corpus other than the one the model was trained on.
 *
 * # Safety
 * Both handles must be live; `out_json` must be writable.
 */
enum FspStatus fsp_evaluate(const struct FspModel *model,
                            const struct FspCorpus *corpus,
                            enum FspSplit split,
                            char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEWSHOT_PERSONA_H */
