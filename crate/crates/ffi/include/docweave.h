/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef DOCWEAVE_H
#define DOCWEAVE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Word ordering strategy for [`dw_reading_order`].
 */
typedef enum DwOrderMethod {
  DW_ORDER_METHOD_RASTER = 0,
  DW_ORDER_METHOD_LAYOUT = 1,
} DwOrderMethod;

/*
 Result of every fallible call.
 */
typedef enum DwStatus {
  DW_STATUS_OK = 0,
  DW_STATUS_NULL_POINTER = 1,
  DW_STATUS_INVALID_ARGUMENT = 2,
  DW_STATUS_IO = 3,
  DW_STATUS_PARSE = 4,
  DW_STATUS_INVALID_DOCUMENT = 5,
  DW_STATUS_CHECKPOINT = 6,
  DW_STATUS_CONFIG = 7,
  DW_STATUS_BUFFER_TOO_SMALL = 8,
  DW_STATUS_INTERNAL = 9,
} DwStatus;

/*
 A loaded document.
 */
typedef struct DwDocument DwDocument;

/*
 A fine-tuned encoder with its task head.
 */
typedef struct DwModel DwModel;

/*
 A token vocabulary.
 */
typedef struct DwVocab DwVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. Valid until
 the next call into this library on the same thread.
 */
const char *dw_last_error(void);

/*
 Library version as a static string.
 */
const char *dw_version(void);

/*
 Loads an OCR-JSON document from `path`.

 # Safety
 `path` is a NUL-terminated string; `out` is writable.
 */
enum DwStatus dw_document_load(const char *path, struct DwDocument **out);

/*
 Parses an OCR-JSON document held in memory. Image references are not
 resolved.

 # Safety
 `json` is a NUL-terminated string; `out` is writable.
 */
enum DwStatus dw_document_parse(const char *json, struct DwDocument **out);

/*
 # Safety
 `doc` is null or a handle from this library not yet freed.
 */
void dw_document_free(struct DwDocument *doc);

/*
 Number of words, 0 for NULL.

 # Safety
 `doc` is null or a live handle.
 */
size_t dw_document_word_count(const struct DwDocument *doc);

/*
 Writes the word permutation into `order` (capacity `cap`) and its length
 into `len`. When `cap` is too small nothing is written to `order`,
 `len` receives the required size and the call returns
 `DW_STATUS_BUFFER_TOO_SMALL`.

 # Safety
 `doc` is a live handle; `order` has room for `cap` values; `len` is
 writable.
 */
enum DwStatus dw_reading_order(const struct DwDocument *doc,
                               enum DwOrderMethod method,
                               size_t *order,
                               size_t cap,
                               size_t *len);

/*
 Loads a vocabulary file (one token per line).

 # Safety
 `path` is a NUL-terminated string; `out` is writable.
 */
enum DwStatus dw_vocab_load(const char *path, struct DwVocab **out);

/*
 # Safety
 `vocab` is null or a handle from this library not yet freed.
 */
void dw_vocab_free(struct DwVocab *vocab);

/*
 Writes `n` synthetic pages with images and `vocab.txt` into `dir`.

 # Safety
 `dir` is a NUL-terminated string.
 */
enum DwStatus dw_generate_corpus(const char *dir, size_t n, uint64_t seed);

/*
 Loads a fine-tuned checkpoint (one written with task head labels).

 # Safety
 `path` is a NUL-terminated string; `out` is writable.
 */
enum DwStatus dw_model_load(const char *path, struct DwModel **out);

/*
 # Safety
 `model` is null or a handle from this library not yet freed.
 */
void dw_model_free(struct DwModel *model);

/*
 Runs the model's head on `doc` and returns the prediction as a JSON
 string in `out`, freed with [`dw_string_free`]. `question` is required
 for QA heads and ignored otherwise; it may be NULL.

 # Safety
 Handles are live; `question` is null or NUL-terminated; `out` is
 writable.
 */
enum DwStatus dw_model_predict_json(const struct DwModel *model,
                                    const struct DwVocab *vocab,
                                    const struct DwDocument *doc,
                                    const char *question,
                                    char **out);

/*
 # Safety
 `s` is null or a string returned by this library not yet freed.
 */
void dw_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DOCWEAVE_H */
