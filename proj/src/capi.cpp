// SPDX-License-Identifier: Apache-2.0

#include "tdnnq/tdnnq.h"

#include <cstring>
#include <new>
#include <string>

#include "pipeline.hpp"
#include "tdnn/serialize.hpp"

// C ABI shim: every entry point catches, stows the message thread-locally
// and maps tdnnq::ErrorKind onto the status enum.

struct tdnnq_model {
  tdnnq::ModelFile file;
};

namespace {

thread_local std::string t_last_error;

tdnnq_status status_from(tdnnq::ErrorKind kind) {
  using tdnnq::ErrorKind;
  switch (kind) {
    case ErrorKind::invalid_argument: return TDNNQ_ERR_INVALID_ARGUMENT;
    case ErrorKind::invalid_input: return TDNNQ_ERR_INVALID_INPUT;
    case ErrorKind::dimension: return TDNNQ_ERR_DIMENSION;
    case ErrorKind::io: return TDNNQ_ERR_IO;
    case ErrorKind::format: return TDNNQ_ERR_FORMAT;
    case ErrorKind::config: return TDNNQ_ERR_CONFIG;
    case ErrorKind::overflow_risk: return TDNNQ_ERR_OVERFLOW_RISK;
    case ErrorKind::diverged: return TDNNQ_ERR_DIVERGED;
    case ErrorKind::internal: return TDNNQ_ERR_INTERNAL;
  }
  return TDNNQ_ERR_INTERNAL;
}

template <typename F>
tdnnq_status guarded(F&& fn) {
  try {
    fn();
    return TDNNQ_OK;
  } catch (const tdnnq::Error& e) {
    t_last_error = e.what();
    return status_from(e.kind());
  } catch (const std::bad_alloc&) {
    t_last_error = "out of memory";
    return TDNNQ_ERR_INTERNAL;
  } catch (const std::exception& e) {
    t_last_error = e.what();
    return TDNNQ_ERR_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

tdnnq_status require(bool ok, const char* what) {
  if (ok) return TDNNQ_OK;
  t_last_error = what;
  return TDNNQ_ERR_INVALID_ARGUMENT;
}

}  // namespace

extern "C" {

const char* tdnnq_version(void) { return "1.0.0"; }

const char* tdnnq_last_error(void) { return t_last_error.c_str(); }

void tdnnq_string_free(char* s) { delete[] s; }

tdnnq_status tdnnq_model_load(const char* path, tdnnq_model** out_model) {
  if (auto st = require(path && out_model, "model_load: null argument")) return st;
  return guarded([&] {
    auto* handle = new tdnnq_model{tdnnq::load_model(path)};
    *out_model = handle;
  });
}

tdnnq_status tdnnq_model_save(const tdnnq_model* model, const char* path) {
  if (auto st = require(model && path, "model_save: null argument")) return st;
  return guarded([&] { tdnnq::save_model(model->file, path); });
}

void tdnnq_model_free(tdnnq_model* model) { delete model; }

tdnnq_status tdnnq_model_input_dim(const tdnnq_model* model, int32_t* out_dim) {
  if (auto st = require(model && out_dim, "model_input_dim: null argument")) return st;
  *out_dim = static_cast<int32_t>(model->file.model.input_dim());
  return TDNNQ_OK;
}

tdnnq_status tdnnq_model_output_dim(const tdnnq_model* model, int32_t* out_dim) {
  if (auto st = require(model && out_dim, "model_output_dim: null argument")) return st;
  *out_dim = static_cast<int32_t>(model->file.model.output_dim());
  return TDNNQ_OK;
}

tdnnq_status tdnnq_model_info_json(const tdnnq_model* model, char** out_json) {
  if (auto st = require(model && out_json, "model_info_json: null argument")) return st;
  return guarded([&] {
    tdnnq::json info = tdnnq::model_summary(model->file.model, model->file.scheme);
    info["is_quantized_bundle"] = model->file.is_bundle();
    info["input_dim"] = model->file.model.input_dim();
    info["output_dim"] = model->file.model.output_dim();
    info["layers"] = model->file.model.layers.size();
    *out_json = dup_string(info.dump(2));
  });
}

tdnnq_status tdnnq_model_forward(const tdnnq_model* model, const float* frames, int32_t num_frames, int32_t frame_dim,
                                 float* out, size_t out_capacity) {
  if (auto st = require(model && frames && out, "model_forward: null argument")) return st;
  if (auto st = require(num_frames > 0 && frame_dim > 0, "model_forward: empty input")) return st;
  return guarded([&] {
    const std::size_t need = static_cast<std::size_t>(num_frames) * model->file.model.output_dim();
    if (out_capacity < need)
      tdnnq::raise(tdnnq::ErrorKind::invalid_argument,
                   "model_forward: output buffer holds " + std::to_string(out_capacity) + " floats, need " +
                       std::to_string(need));
    tdnnq::Matrix x(static_cast<std::size_t>(num_frames), static_cast<std::size_t>(frame_dim));
    std::memcpy(x.data.data(), frames, x.size() * sizeof(float));
    const tdnnq::Matrix y = model->file.is_bundle() ? tdnnq::forward_quantized(model->file.as_quantized(), x)
                                                    : tdnnq::forward_float(model->file.model, x);
    std::memcpy(out, y.data.data(), y.size() * sizeof(float));
  });
}

tdnnq_status tdnnq_train_toy(const char* config_path, const char* out_dir, char** out_report_json) {
  if (auto st = require(config_path && out_dir, "train_toy: null argument")) return st;
  return guarded([&] {
    const tdnnq::json report = tdnnq::cmd_train_toy(config_path, out_dir);
    if (out_report_json) *out_report_json = dup_string(report.dump(2));
  });
}

tdnnq_status tdnnq_quantize(const char* model_path, int32_t bits, const char* scheme, const char* calib_path,
                            const char* out_model_path, char** out_report_json) {
  if (auto st = require(model_path && scheme && out_model_path, "quantize: null argument")) return st;
  return guarded([&] {
    const tdnnq::json report =
        tdnnq::cmd_quantize(model_path, bits, scheme, calib_path ? calib_path : "", out_model_path);
    if (out_report_json) *out_report_json = dup_string(report.dump(2));
  });
}

tdnnq_status tdnnq_evaluate(const char* model_path, const char* features_path, const char* labels_path,
                            char** out_report_json) {
  if (auto st = require(model_path && features_path && labels_path, "evaluate: null argument")) return st;
  return guarded([&] {
    const tdnnq::json report = tdnnq::cmd_eval(model_path, features_path, labels_path);
    if (out_report_json) *out_report_json = dup_string(report.dump(2));
  });
}

tdnnq_status tdnnq_compare(const char* const* model_paths, size_t num_models, const char* features_path,
                           const char* labels_path, char** out_report_json, char** out_table_text) {
  if (auto st = require(model_paths && features_path && labels_path, "compare: null argument")) return st;
  return guarded([&] {
    std::vector<std::string> paths;
    for (size_t i = 0; i < num_models; ++i) {
      if (!model_paths[i]) tdnnq::raise(tdnnq::ErrorKind::invalid_argument, "compare: null model path");
      paths.emplace_back(model_paths[i]);
    }
    const tdnnq::json report = tdnnq::cmd_compare(paths, features_path, labels_path);
    if (out_report_json) *out_report_json = dup_string(report.dump(2));
    if (out_table_text) *out_table_text = dup_string(tdnnq::render_compare_table(report));
  });
}

tdnnq_status tdnnq_qat_train(const char* checkpoint_path, const char* config_path, const char* schedule,
                             double activate_after_fraction, const char* out_checkpoint_path, int64_t max_steps,
                             int resume, char** out_report_json) {
  if (auto st = require(checkpoint_path && config_path && out_checkpoint_path, "qat_train: null argument")) return st;
  return guarded([&] {
    const tdnnq::json report = tdnnq::cmd_qat(checkpoint_path, config_path, schedule ? schedule : "",
                                              activate_after_fraction, out_checkpoint_path, max_steps, resume != 0);
    if (out_report_json) *out_report_json = dup_string(report.dump(2));
  });
}

}  // extern "C"
