// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qat/qat.hpp"
#include "report/report.hpp"

namespace tdnnq {

// Command-level entry points behind both the C API and the CLI. Every
// command is deterministic given its arguments plus the config seed; wall
// clock measurements live only under the report's "timing" key.

ToyTaskConfig parse_toy_config(const std::string& path);

// Trains the float toy model and writes model.tdnq, eval/calib feature and
// label files, and report.json into out_dir.
json cmd_train_toy(const std::string& config_path, const std::string& out_dir);

// scheme: "weights-only" | "full-custom" | "full-requant". The calibration
// path may be a feature file or a QAT sidecar (observer ranges; custom
// scheme only). Writes the quantized model and a JSON report next to it.
json cmd_quantize(const std::string& model_path, int bits, const std::string& scheme, const std::string& calib_path,
                  const std::string& out_path);

json cmd_eval(const std::string& model_path, const std::string& features_path, const std::string& labels_path);

json cmd_compare(const std::vector<std::string>& model_paths, const std::string& features_path,
                 const std::string& labels_path);

// schedule_override: "" keeps the config schedule, otherwise "full-epoch"
// or "final-iterations"; fraction_override < 0 keeps the config fraction.
// max_steps < 0 runs to completion; resume continues from out_path and its
// sidecar.
json cmd_qat(const std::string& checkpoint_path, const std::string& config_path, const std::string& schedule_override,
             double fraction_override, const std::string& out_path, std::int64_t max_steps, bool resume);

}  // namespace tdnnq
