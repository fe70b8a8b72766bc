#ifndef DISTILLRAG_H
#define DISTILLRAG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes shared by all functions.
 */
typedef enum DrStatus {
  DR_STATUS_OK = 0,
  DR_STATUS_NULL_ARGUMENT = 1,
  DR_STATUS_INVALID_UTF8 = 2,
  DR_STATUS_INVALID_ARGUMENT = 3,
  DR_STATUS_IO = 4,
  DR_STATUS_PARSE = 5,
  DR_STATUS_SCHEMA_VIOLATION = 6,
  DR_STATUS_DUPLICATE_ENTITY = 7,
  DR_STATUS_EMPTY_DATABASE = 8,
  DR_STATUS_EMPTY_QUERY = 9,
  DR_STATUS_NO_TOOL_CALL = 10,
  DR_STATUS_UNBALANCED_PARENS = 11,
  DR_STATUS_EMBEDDING = 12,
  DR_STATUS_PANIC = 99,
} DrStatus;

typedef enum DrGranularity {
  DR_GRANULARITY_COARSE = 0,
  DR_GRANULARITY_FINE = 1,
} DrGranularity;

/*
 Opaque index handle.
 */
typedef struct DrIndex DrIndex;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or null. Valid until the
 next failing call on the same thread; do not free.
 */
const char *dr_last_error(void);

/*
 Library version as a static string.
 */
const char *dr_version(void);

/*
 Builds an index from a JSON database body using the local-hash embedder
 with `dim` buckets.

 # Safety
 `json` must be a valid NUL-terminated string; `out` a valid pointer.
 */
enum DrStatus dr_index_open_json(const char *json, uintptr_t dim, struct DrIndex **out);

/*
 Like [`dr_index_open_json`], reading the database from `path`.

 # Safety
 `path` must be a valid NUL-terminated string; `out` a valid pointer.
 */
enum DrStatus dr_index_open_file(const char *path, uintptr_t dim, struct DrIndex **out);

/*
 Releases an index. Null is ignored.

 # Safety
 `index` must come from `dr_index_open_*` and not be used afterwards.
 */
void dr_index_free(struct DrIndex *index);

/*
 # Safety
 `index` must be a live handle; the out-pointers valid.
 */
enum DrStatus dr_index_stats(const struct DrIndex *index, uintptr_t *entities, uintptr_t *items);

/*
 Searches the index and writes the result as a JSON string
 (`{"granularity", "candidates": [{"key", "score", "evidence_text"}]}`).
 Fine search is hierarchical with the default fan-out.

 # Safety
 `index` must be a live handle, `query` a NUL-terminated string and
 `out_json` a valid pointer.
 */
enum DrStatus dr_index_search(const struct DrIndex *index,
                              const char *query,
                              enum DrGranularity granularity,
                              uintptr_t num,
                              char **out_json);

/*
 Extracts the query of the first `search_engine(...)` call in `text`.

 # Safety
 `text` must be a NUL-terminated string; `out_query` a valid pointer.
 */
enum DrStatus dr_parse_tool_call(const char *text, char **out_query);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not be used afterwards.
 */
void dr_string_free(char *s);

/*
 Expected score of a player rated `r_a` against one rated `r_b`.
 */
double dr_elo_expected(double r_a, double r_b);

/*
 One rating update. `s_a` is 1 (A wins), 0.5 (draw) or 0 (B wins).

 # Safety
 `new_a` and `new_b` must be valid pointers.
 */
enum DrStatus dr_elo_update(double r_a,
                            double r_b,
                            double s_a,
                            double k,
                            double *new_a,
                            double *new_b);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DISTILLRAG_H */
