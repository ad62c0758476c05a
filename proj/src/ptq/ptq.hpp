// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tdnn/model.hpp"
#include "tdnn/serialize.hpp"

namespace tdnnq {

// Running min/max of activations observed on a calibration set. Entry i
// covers layer i's spliced input and its pre-bias convolution product; the
// final entry covers the output head.
struct CalibrationStats {
  std::vector<RangeStats> layer_inputs;
  std::vector<RangeStats> layer_products;
  std::size_t frames_seen = 0;

  void validate(std::size_t n_layers) const;
};

// Selects a quantization pipeline: absent act_bits means weight-only
// quantization (snapped weights, float inference); otherwise weights and
// activations are quantized and executed by the chosen integer scheme.
struct QuantConfig {
  QuantBits weight_bits = QuantBits::b8;
  std::optional<QuantBits> act_bits;
  QuantScheme scheme = QuantScheme::custom;
};

// Forward the calibration set through the float model, recording the
// elementwise min/max of every layer's spliced input and product. Min/max
// merging is commutative, so the result is utterance-order invariant.
CalibrationStats calibrate(const TdnnModel& model, const FeatureSet& calibration);

// Weight-only quantization: every weight matrix is snapped onto its
// per-tensor symmetric grid and keeps integer storage params; biases and
// batch-norm terms stay untouched and inference remains the float path.
TdnnModel quantize_weights_only(const TdnnModel& model, QuantBits bits);

// Per-layer record for the quantization report.
struct LayerQuantRecord {
  std::string name;
  QuantParams weight_params;
  std::optional<QuantParams> act_params;
  std::optional<QuantParams> out_params;
  RangeStats observed_input;
  std::size_t act_saturations = 0;  // filled by audit_saturations
};

struct FullQuantResult {
  QuantizedModel qmodel;
  std::vector<LayerQuantRecord> records;
};

// Weights-and-activations quantization from calibration stats.
//   custom scheme:  symmetric signed activations, float-output kernels.
//   requant scheme: asymmetric activations and requantized outputs over the
//                   non-negative integer range.
// Activations default to the weight bit width; the kernels accept mixed
// widths (the accumulator widens when either side is 16-bit).
FullQuantResult quantize_full(const TdnnModel& model, const CalibrationStats& stats, QuantBits bits,
                              QuantScheme scheme = QuantScheme::custom,
                              std::optional<QuantBits> act_bits = std::nullopt);

// Runs the pipeline the config selects. stats may be null for weight-only
// configs and is required otherwise.
struct QuantizationOutcome {
  ModelFile file;
  std::vector<LayerQuantRecord> records;
};
QuantizationOutcome apply_quantization(const TdnnModel& model, const QuantConfig& config,
                                       const CalibrationStats* stats);

// Counts activations whose unclamped quantized value falls outside the
// integer range, per layer (plus head), along the model's float forward
// pass over the given features.
std::vector<std::size_t> audit_saturations(const TdnnModel& model, const std::vector<QuantParams>& act_params,
                                           const FeatureSet& features);

}  // namespace tdnnq
