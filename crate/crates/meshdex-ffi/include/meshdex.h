#ifndef MESHDEX_H
#define MESHDEX_H

/* Generated by cbindgen from the meshdex-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirroring the CLI failure classes.
 */
typedef enum {
  MESHDEX_STATUS_OK = 0,
  /**
   * Null pointer, non-UTF8 string or otherwise unusable argument.
   */
  MESHDEX_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Unreadable or malformed input data.
   */
  MESHDEX_STATUS_DATA_ERROR = 2,
  /**
   * Numeric failure inside the pipeline.
   */
  MESHDEX_STATUS_NUMERIC_ERROR = 3,
} MeshdexStatus;

/**
 * Opaque ontology handle.
 */
typedef struct MeshdexOntology MeshdexOntology;

/**
 * Flat and hierarchical evaluation measures. Hierarchical fields are set
 * to -1 when no hierarchical evaluation was performed.
 */
typedef struct {
  double micro_precision;
  double micro_recall;
  double micro_f;
  double macro_precision;
  double macro_recall;
  double macro_f;
  double accuracy;
  double subset_accuracy;
  double lca_precision;
  double lca_recall;
  double lca_f;
} MeshdexMetrics;

/**
 * Library version as a static NUL-terminated string.
 */
const char *meshdex_version(void);

/**
 * Message of the last error on this thread, or null when the last call
 * succeeded. The pointer stays valid until the next failing call.
 */
const char *meshdex_last_error(void);

/**
 * Load an ontology file into an opaque handle. On success writes the
 * handle through `out` and returns `Ok`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be a valid
 * pointer to a handle slot.
 */
MeshdexStatus meshdex_ontology_load(const char *path, MeshdexOntology **out);

/**
 * Release an ontology handle. Null is a no-op.
 *
 * # Safety
 * `onto` must be a pointer previously returned by
 * [`meshdex_ontology_load`] that has not yet been freed.
 */
void meshdex_ontology_free(MeshdexOntology *onto);

/**
 * Number of nodes in the ontology; 0 for a null handle.
 *
 * # Safety
 * `onto` must be a live handle from [`meshdex_ontology_load`] or null.
 */
uintptr_t meshdex_ontology_node_count(const MeshdexOntology *onto);

/**
 * Evaluate a prediction file against a gold file (both in
 * `doc_id<TAB>comma-separated-ids` format) over the given ontology,
 * producing flat and hierarchical measures.
 *
 * # Safety
 * `gold_path` and `pred_path` must be valid NUL-terminated strings,
 * `onto` a live ontology handle, and `out` a valid metrics slot.
 */
MeshdexStatus meshdex_evaluate_files(const char *gold_path,
                                     const char *pred_path,
                                     const MeshdexOntology *onto,
                                     MeshdexMetrics *out);

/**
 * Ontology-file variant of [`meshdex_evaluate_files`] for callers that do
 * not hold an ontology handle.
 *
 * # Safety
 * All three paths must be valid NUL-terminated strings and `out` a valid
 * metrics slot.
 */
MeshdexStatus meshdex_evaluate_paths(const char *gold_path,
                                     const char *pred_path,
                                     const char *ontology_path,
                                     MeshdexMetrics *out);

/**
 * Porter-stem a lowercase token. The returned string must be released
 * with [`meshdex_string_free`].
 *
 * # Safety
 * `token` must be a valid NUL-terminated string.
 */
char *meshdex_stem(const char *token);

/**
 * Release a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must come from a meshdex function and not have been freed before.
 */
void meshdex_string_free(char *s);

#endif  /* MESHDEX_H */
