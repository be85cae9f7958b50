#ifndef CARDIOTWIN_H
#define CARDIOTWIN_H

/* Stable C interface to the cardiotwin runtime. Every function that takes a
 * char** out-parameter hands back a heap string that must be released with
 * ct_free. On failure the functions return a non-zero status and
 * ct_last_error() describes the problem for the calling thread. */

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define CT_API __attribute__((visibility("default")))
#else
#define CT_API
#endif

typedef enum ct_status {
    CT_OK = 0,
    CT_ERR_CONFIG = 1,
    CT_ERR_PARSE = 2,
    CT_ERR_VERSION = 3,
    CT_ERR_VALIDATION = 4,
    CT_ERR_ROUTING = 5,
    CT_ERR_TRANSPORT = 6,
    CT_ERR_PARAMETER = 7,
    CT_ERR_NUMERIC = 8,
    CT_ERR_SHAPE = 9,
    CT_ERR_DEGENERATE_INPUT = 10,
    CT_ERR_REFERENCE = 11,
    CT_ERR_IO = 12,
    CT_ERR_INTERNAL = 99
} ct_status;

typedef struct ct_scenario ct_scenario;

CT_API const char* ct_version(void);
CT_API const char* ct_last_error(void);
CT_API const char* ct_status_name(ct_status status);
CT_API void ct_free(char* text);

/* Builds a scenario from JSON config text; the resolved config is available
 * through ct_scenario_config. */
CT_API ct_status ct_scenario_create(const char* config_json, ct_scenario** out);
CT_API void ct_scenario_destroy(ct_scenario* scenario);
CT_API ct_status ct_scenario_config(const ct_scenario* scenario, char** config_json);
/* Runs to completion and returns the exit report as JSON. */
CT_API ct_status ct_scenario_run(ct_scenario* scenario, char** report_json);
/* Async-signal-safe: only sets a flag polled by the run. */
CT_API void ct_scenario_request_stop(ct_scenario* scenario);

/* Joins predictions.ndjson and outcomes.ndjson from in_dir and writes
 * report.csv, confusion.json and summary.json to out_dir. */
CT_API ct_status ct_report_export(const char* in_dir, const char* out_dir, char** summary_json);

/* Simulates a fleet (fleet JSON) in replay mode and writes frames.ndjson,
 * deliveries.ndjson and outcomes.ndjson to out_dir. */
CT_API ct_status ct_simulate(const char* fleet_json, const char* out_dir, char** summary_json);

/* Resolved architecture, parameter and multiply-accumulate counts for a
 * scaling config (phi, alpha, beta, gamma, base). */
CT_API ct_status ct_net_info(const char* scaling_json, char** info_json);

/* Offline training on the synthetic or twin dataset; optionally saves params. */
CT_API ct_status ct_train(const char* train_json, char** result_json);

#ifdef __cplusplus
}
#endif

#endif
