/* C interface to the inheritlab library.
 *
 * Every function that can fail returns an ilab_status. On failure the
 * message is available from ilab_last_error() on the same thread until the
 * next failing call. Objects are opaque and released with their _free
 * function; strings returned as char* are released with ilab_string_free.
 * Strings returned as const char* are owned by the object they came from.
 */
#ifndef INHERITLAB_H
#define INHERITLAB_H

#include <stddef.h>

#if defined(_WIN32)
#define ILAB_API __declspec(dllexport)
#else
#define ILAB_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ilab_status {
  ILAB_OK = 0,
  ILAB_E_INVALID_ARGUMENT = 1,
  ILAB_E_CONFIG = 2,
  ILAB_E_IO = 3,
  ILAB_E_INGEST = 4,
  ILAB_E_NUMERICAL = 5,
  ILAB_E_TRAINING = 6,
  ILAB_E_PROTOCOL = 7,
  ILAB_E_TRANSIENT = 8,
  ILAB_E_UNDEFINED = 9,
  ILAB_E_INTERNAL = 10
} ilab_status;

typedef struct ilab_config ilab_config;
typedef struct ilab_result ilab_result;
typedef struct ilab_model ilab_model;
typedef struct ilab_server ilab_server;

typedef void (*ilab_log_fn)(const char* line, void* user);

ILAB_API const char* ilab_version(void);
ILAB_API const char* ilab_last_error(void);
ILAB_API const char* ilab_status_name(ilab_status status);
/* Process exit status for a failed call: 1 for validation errors, 2 otherwise. */
ILAB_API int ilab_exit_code(ilab_status status);
ILAB_API void ilab_string_free(char* s);

/* Commands accepted by ilab_run, e.g. "das sweep". */
ILAB_API size_t ilab_command_count(void);
ILAB_API const char* ilab_command_name(size_t i);

/* Configuration. `json` may be NULL or empty for the built-in defaults.
 * Overrides look like "das.epochs=3". */
ILAB_API char* ilab_default_config_json(void);
ILAB_API ilab_status ilab_config_parse(const char* json, const char* const* overrides, size_t n_overrides,
                                       ilab_config** out);
ILAB_API ilab_status ilab_config_load(const char* path, const char* const* overrides, size_t n_overrides,
                                      ilab_config** out);
ILAB_API ilab_status ilab_config_set(ilab_config* cfg, const char* override_kv);
ILAB_API ilab_status ilab_config_validate(const ilab_config* cfg);
ILAB_API char* ilab_config_json(const ilab_config* cfg);
ILAB_API void ilab_config_free(ilab_config* cfg);

/* Runs one command. `log` may be NULL. On success *out holds the result,
 * whose status is 0, or 3 when some sweep cells failed. */
ILAB_API ilab_status ilab_run(const ilab_config* cfg, const char* command, ilab_log_fn log, void* user,
                              ilab_result** out);
ILAB_API int ilab_result_status(const ilab_result* r);
ILAB_API size_t ilab_result_artifact_count(const ilab_result* r);
ILAB_API const char* ilab_result_artifact(const ilab_result* r, size_t i);
ILAB_API size_t ilab_result_failure_count(const ilab_result* r);
ILAB_API const char* ilab_result_failure(const ilab_result* r, size_t i);
ILAB_API const char* ilab_result_summary(const ilab_result* r);
ILAB_API void ilab_result_free(ilab_result* r);

/* A saved toy model, for direct scoring. */
ILAB_API ilab_status ilab_model_load(const char* path, ilab_model** out);
/* Writes one log-probability per continuation into `logprobs`. */
ILAB_API ilab_status ilab_model_score(const ilab_model* m, const char* prompt, const char* const* continuations,
                                      size_t n, double* logprobs);
ILAB_API void ilab_model_free(ilab_model* m);

/* Serves a model over the scoring wire protocol on 127.0.0.1.
 * Port 0 picks a free port; ilab_server_port reports it. */
ILAB_API ilab_status ilab_server_start(const ilab_model* m, const char* model_id, int port, ilab_server** out);
ILAB_API int ilab_server_port(const ilab_server* s);
ILAB_API size_t ilab_server_requests(const ilab_server* s);
ILAB_API void ilab_server_free(ilab_server* s);

#ifdef __cplusplus
}
#endif

#endif
