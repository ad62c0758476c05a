/* SPDX-License-Identifier: Apache-2.0
 *
 * tdnnq - quantized TDNN inference and training library, C interface.
 *
 * All functions return tdnnq_status; TDNNQ_OK is 0. On failure a
 * thread-local message is available from tdnnq_last_error(). Strings
 * returned through char** out-parameters are heap-allocated and must be
 * released with tdnnq_string_free(). Handles are opaque and must be
 * released with their matching _free function.
 */

#ifndef TDNNQ_H
#define TDNNQ_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define TDNNQ_API __declspec(dllexport)
#else
#define TDNNQ_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum tdnnq_status {
  TDNNQ_OK = 0,
  TDNNQ_ERR_INVALID_ARGUMENT = 1,
  TDNNQ_ERR_INVALID_INPUT = 2,
  TDNNQ_ERR_DIMENSION = 3,
  TDNNQ_ERR_IO = 4,
  TDNNQ_ERR_FORMAT = 5,
  TDNNQ_ERR_CONFIG = 6,
  TDNNQ_ERR_OVERFLOW_RISK = 7,
  TDNNQ_ERR_DIVERGED = 8,
  TDNNQ_ERR_INTERNAL = 9
} tdnnq_status;

/* Opaque model handle: a float checkpoint or a quantized bundle. */
typedef struct tdnnq_model tdnnq_model;

TDNNQ_API const char* tdnnq_version(void);

/* Thread-local message for the most recent failure on this thread. */
TDNNQ_API const char* tdnnq_last_error(void);

TDNNQ_API void tdnnq_string_free(char* s);

/* ------------------------------------------------------------------ */
/* Model handles                                                      */
/* ------------------------------------------------------------------ */

TDNNQ_API tdnnq_status tdnnq_model_load(const char* path, tdnnq_model** out_model);
TDNNQ_API tdnnq_status tdnnq_model_save(const tdnnq_model* model, const char* path);
TDNNQ_API void tdnnq_model_free(tdnnq_model* model);

TDNNQ_API tdnnq_status tdnnq_model_input_dim(const tdnnq_model* model, int32_t* out_dim);
TDNNQ_API tdnnq_status tdnnq_model_output_dim(const tdnnq_model* model, int32_t* out_dim);

/* Name, head kind, parameter count, payload bytes and quantization setup,
 * as a JSON document. */
TDNNQ_API tdnnq_status tdnnq_model_info_json(const tdnnq_model* model, char** out_json);

/* Log-probability outputs for num_frames rows of frame_dim features.
 * Quantized bundles run the integer path, float checkpoints the float
 * path. out must hold num_frames * output_dim floats. */
TDNNQ_API tdnnq_status tdnnq_model_forward(const tdnnq_model* model, const float* frames, int32_t num_frames,
                                           int32_t frame_dim, float* out, size_t out_capacity);

/* ------------------------------------------------------------------ */
/* Commands (the CLI is a thin shim over these)                       */
/* ------------------------------------------------------------------ */

/* Trains the synthetic toy task per the JSON config; writes model.tdnq,
 * eval/calibration data files and report.json into out_dir. */
TDNNQ_API tdnnq_status tdnnq_train_toy(const char* config_path, const char* out_dir, char** out_report_json);

/* scheme: "weights-only", "full-custom" or "full-requant". calib_path may
 * be NULL for weights-only; for full-* it names a feature file or a QAT
 * sidecar. */
TDNNQ_API tdnnq_status tdnnq_quantize(const char* model_path, int32_t bits, const char* scheme,
                                      const char* calib_path, const char* out_model_path, char** out_report_json);

TDNNQ_API tdnnq_status tdnnq_evaluate(const char* model_path, const char* features_path, const char* labels_path,
                                      char** out_report_json);

/* First path is the baseline row. out_table_text receives the rendered
 * text table (optional; pass NULL to skip). */
TDNNQ_API tdnnq_status tdnnq_compare(const char* const* model_paths, size_t num_models, const char* features_path,
                                     const char* labels_path, char** out_report_json, char** out_table_text);

/* schedule: NULL or "" keeps the config schedule, else "full-epoch" or
 * "final-iterations". activate_after_fraction < 0 keeps the config value.
 * max_steps < 0 runs the configured number of epochs to completion;
 * otherwise training stops after max_steps optimizer steps and the state
 * is resumable. resume != 0 continues from out_checkpoint_path and its
 * .qat sidecar. */
TDNNQ_API tdnnq_status tdnnq_qat_train(const char* checkpoint_path, const char* config_path, const char* schedule,
                                       double activate_after_fraction, const char* out_checkpoint_path,
                                       int64_t max_steps, int resume, char** out_report_json);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* TDNNQ_H */
