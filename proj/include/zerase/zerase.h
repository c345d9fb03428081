/* SPDX-License-Identifier: Apache-2.0 */
/*
 * C interface to the zerase library.
 *
 * Every function returns a zr_status. On failure a description is available
 * from zr_last_error() on the calling thread until the next call. Strings
 * returned through `char**` out-parameters are owned by the caller and must be
 * released with zr_string_free().
 */
#ifndef ZERASE_H
#define ZERASE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define ZR_API __declspec(dllexport)
#else
#define ZR_API __attribute__((visibility("default")))
#endif

typedef enum zr_status {
  ZR_OK = 0,
  ZR_ERR_VALIDATION = 1, /* bad config, bad ids, incompatible checkpoints */
  ZR_ERR_USAGE = 2,      /* bad arguments to the API itself */
  ZR_ERR_IO = 3,
  ZR_ERR_CORRUPT = 4, /* checkpoint failed integrity checks */
  ZR_ERR_NUMERIC = 5, /* NaN/Inf during training, singular dual */
  ZR_ERR_CONTRACT = 6,
  ZR_ERR_INTERNAL = 7
} zr_status;

typedef enum zr_phase {
  ZR_PHASE_TRAIN_BASE = 0,
  ZR_PHASE_ERASE = 1,
  ZR_PHASE_SAMPLE = 2,
  ZR_PHASE_EVAL = 3,
  ZR_PHASE_MERGE = 4,
  ZR_PHASE_DIAGNOSE = 5,
  ZR_PHASE_DIAGNOSE_QUADRATIC = 6,
  ZR_PHASE_BYPASS_DEMO = 7,
  ZR_PHASE_PLOT = 8
} zr_phase;

typedef struct zr_session zr_session;
typedef struct zr_model zr_model;
typedef struct zr_lora zr_lora;

/* Receives human-readable progress, one line at a time (without newline). */
typedef void (*zr_log_fn)(const char* line, void* user);

ZR_API const char* zr_version(void);
ZR_API const char* zr_status_name(zr_status s);
ZR_API const char* zr_last_error(void);
ZR_API void zr_string_free(char* s);

/* config_json may be NULL for all defaults. */
ZR_API zr_status zr_session_create(const char* config_json, zr_session** out);
ZR_API zr_status zr_session_from_file(const char* path, zr_session** out);
ZR_API void zr_session_free(zr_session* s);
/* "section.key=value"; value is parsed as JSON, else taken as a string. */
ZR_API zr_status zr_session_set(zr_session* s, const char* assignment);
/* Fully resolved configuration including config_hash. */
ZR_API zr_status zr_session_config(const zr_session* s, char** out_json);
ZR_API zr_status zr_session_run_dir(const zr_session* s, char** out_path);

/* passed and summary_json may be NULL. */
ZR_API zr_status zr_run_phase(zr_session* s, zr_phase phase, zr_log_fn log, void* user, int* passed,
                              char** summary_json);

ZR_API zr_status zr_model_load(const char* path, zr_model** out);
ZR_API void zr_model_free(zr_model* m);
ZR_API zr_status zr_model_checksum(const zr_model* m, uint64_t* out);
ZR_API zr_status zr_model_config(const zr_model* m, char** out_json);
/* Doubles written per generated sample (n_image * d_data). */
ZR_API zr_status zr_model_sample_width(const zr_model* m, size_t* out);

/* base may be NULL to skip the compatibility check. */
ZR_API zr_status zr_lora_load(const char* path, const zr_model* base, zr_lora** out);
ZR_API void zr_lora_free(zr_lora* l);
ZR_API zr_status zr_lora_rank(const zr_lora* l, size_t* out);

/* concept < 0 samples unconditionally; lora may be NULL. `out` must hold
 * count * sample_width doubles. */
ZR_API zr_status zr_sample(const zr_model* m, const zr_lora* lora, int64_t concept_id, size_t count, size_t steps,
                           uint64_t seed, double* out, size_t out_len);

/* Energy distance between row-major point clouds of width dim. */
ZR_API zr_status zr_energy_distance(const double* x, size_t nx, const double* y, size_t ny, size_t dim,
                                    double* out);

#ifdef __cplusplus
}
#endif

#endif /* ZERASE_H */
