#ifndef CONTEE_H
#define CONTEE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum ConteeStatus {
  CONTEE_STATUS_OK = 0,
  CONTEE_STATUS_NULL_POINTER = 1,
  CONTEE_STATUS_INVALID_UTF8 = 2,
  CONTEE_STATUS_INVALID_ARGUMENT = 3,
  CONTEE_STATUS_IO = 4,
  CONTEE_STATUS_PARSE = 5,
  CONTEE_STATUS_CONFIG = 6,
  CONTEE_STATUS_CHECKPOINT = 7,
  CONTEE_STATUS_NOT_READY = 8,
  CONTEE_STATUS_INTERNAL = 9,
  CONTEE_STATUS_PANIC = 10,
} ConteeStatus;

// Trained argument extractor.
typedef struct ConteeArguments ConteeArguments;

// Run configuration.
typedef struct ConteeConfig ConteeConfig;

// Trained trigger detector.
typedef struct ConteeDetector ConteeDetector;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string.
const char *contee_version(void);

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call on the same thread.
const char *contee_last_error(void);

// # Safety
// `s` must come from this library, or be null.
void contee_string_free(char *s);

// Default configuration.
//
// # Safety
// `out` must be a valid pointer.
enum ConteeStatus contee_config_new(struct ConteeConfig **out);

// Configuration parsed from TOML text; missing keys take their defaults.
//
// # Safety
// `toml` must be a NUL-terminated string and `out` a valid pointer.
enum ConteeStatus contee_config_from_toml(const char *toml, struct ConteeConfig **out);

// Configuration read from a TOML file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum ConteeStatus contee_config_load(const char *path, struct ConteeConfig **out);

// # Safety
// `cfg` must be a live handle and `dir` a NUL-terminated string.
enum ConteeStatus contee_config_set_output_dir(struct ConteeConfig *cfg, const char *dir);

// Serializes the configuration as TOML.
//
// # Safety
// `cfg` must be a live handle and `out` a valid pointer.
enum ConteeStatus contee_config_to_toml(const struct ConteeConfig *cfg, char **out);

// # Safety
// `cfg` must come from this library, or be null.
void contee_config_free(struct ConteeConfig *cfg);

// Trains every stage of the configured stream and writes its artifacts to
// the output directory. `report_json`, when not null, receives the run
// report as JSON.
//
// # Safety
// `cfg` must be a live handle; `report_json` a valid pointer or null.
enum ConteeStatus contee_run(const struct ConteeConfig *cfg, char **report_json);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum ConteeStatus contee_detector_load(const char *path, struct ConteeDetector **out);

// # Safety
// `det` must come from this library, or be null.
void contee_detector_free(struct ConteeDetector *det);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum ConteeStatus contee_arguments_load(const char *path, struct ConteeArguments **out);

// # Safety
// `args` must come from this library, or be null.
void contee_arguments_free(struct ConteeArguments *args);

// Detects the events of one tokenized sentence and, when `args` is not
// null, fills in their arguments. `out_json` receives a JSON array of
// `{"trigger": {"start", "end"}, "type", "args"}` objects; spans are
// inclusive token indices.
//
// # Safety
// `det` must be a live handle, `args` a live handle or null, `tokens` an
// array of `n` NUL-terminated strings and `out_json` a valid pointer.
enum ConteeStatus contee_predict(const struct ConteeDetector *det,
                                 const struct ConteeArguments *args,
                                 const char *const *tokens,
                                 size_t n,
                                 char **out_json);

// Scores a JSON-lines predictions file against a gold corpus. `out_json`
// receives `{"detection": {...}, "arguments": {...}}` with precision,
// recall, F1 and counts.
//
// # Safety
// Both paths must be NUL-terminated strings and `out_json` a valid pointer.
enum ConteeStatus contee_evaluate(const char *predictions_path,
                                  const char *gold_path,
                                  char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONTEE_H */
