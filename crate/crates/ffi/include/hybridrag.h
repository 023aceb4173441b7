#ifndef HYBRIDRAG_H
#define HYBRIDRAG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum HrStatus {
  HR_STATUS_OK = 0,
  // A required pointer argument was NULL.
  HR_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  HR_STATUS_INVALID_UTF8 = 2,
  // Config file or setting could not be used.
  HR_STATUS_CONFIG = 3,
  // A file could not be read or written.
  HR_STATUS_IO = 4,
  // A pipeline stage or ingestion step failed.
  HR_STATUS_PIPELINE = 5,
  // Argument value out of range.
  HR_STATUS_INVALID_ARGUMENT = 6,
  // The library panicked; the handle should be considered unusable.
  HR_STATUS_PANIC = 7,
} HrStatus;

// Opaque pipeline handle.
typedef struct HrPipeline HrPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or "" after a success.
// Valid until the next call into this library on the same thread.
const char *hr_last_error(void);

// Library version as a static NUL-terminated string.
const char *hr_version(void);

// Open a pipeline. `config_path` (key = value file) and `store_dir` may be
// NULL; without a store the pipeline starts empty.
//
// # Safety
// String arguments must be NULL or NUL-terminated; `out` must be writable.
enum HrStatus hr_pipeline_open(const char *config_path,
                               const char *store_dir,
                               struct HrPipeline **out);

// Ingest a JSONL corpus (`{doc_id, title, text}` per line) into the
// pipeline's stores. If `out_report_json` is not NULL it receives the
// ingestion report as JSON.
//
// # Safety
// `p` must come from `hr_pipeline_open`; `corpus_path` NUL-terminated.
enum HrStatus hr_pipeline_ingest(struct HrPipeline *p,
                                 const char *corpus_path,
                                 char **out_report_json);

// Persist the pipeline's stores into `dir`.
//
// # Safety
// `p` must come from `hr_pipeline_open`; `dir` NUL-terminated.
enum HrStatus hr_pipeline_save(struct HrPipeline *p, const char *dir);

// Answer a question; `out_text` receives the answer text.
//
// # Safety
// `p` must come from `hr_pipeline_open`; `question` NUL-terminated;
// `out_text` writable.
enum HrStatus hr_pipeline_ask(struct HrPipeline *p, const char *question, char **out_text);

// Answer a question; `out_json` receives the full answer (text, augmented
// query, route, context, trace) as JSON.
//
// # Safety
// Same as `hr_pipeline_ask`.
enum HrStatus hr_pipeline_ask_json(struct HrPipeline *p, const char *question, char **out_json);

// Release a pipeline. NULL is ignored.
//
// # Safety
// `p` must be NULL or come from `hr_pipeline_open` and not be used again.
void hr_pipeline_free(struct HrPipeline *p);

// Release a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must be NULL or a string returned through an out-parameter of this
// library, not freed before.
void hr_string_free(char *s);

// BLEU-1 of `candidate` against `n_references` reference strings.
//
// # Safety
// `candidate` NUL-terminated; `references` points to `n_references`
// NUL-terminated strings; `out` writable.
enum HrStatus hr_bleu1(const char *candidate,
                       const char *const *references,
                       size_t n_references,
                       double *out);

// ROUGE-1 recall of `candidate`, best over the references.
//
// # Safety
// Same as `hr_bleu1`.
enum HrStatus hr_rouge1(const char *candidate,
                        const char *const *references,
                        size_t n_references,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYBRIDRAG_H */
