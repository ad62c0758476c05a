// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "common/matrix.hpp"
#include "kernels/int_kernels.hpp"
#include "quant/quant_core.hpp"

namespace tdnnq {

enum class HeadKind : std::uint8_t { toy = 0, monophone = 1, biphone = 2 };
enum class LayerKind : std::uint8_t { dense = 0, factorized = 1 };

// One TDNN layer: context splice followed by an affine map, ReLU and an
// inference-time batch-norm affine. A factorized layer stores the low-rank
// factors instead of the dense weight matrix.
struct TdnnLayer {
  LayerKind kind = LayerKind::dense;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::vector<std::int32_t> context_offsets{-1, 0, 1};

  Matrix weights;   // out_dim x (in_dim * |context|), dense layers
  Matrix factor_a;  // out_dim x rank, factorized layers
  Matrix factor_b;  // rank x (in_dim * |context|)
  std::size_t rank = 0;

  std::vector<float> bias;      // out_dim
  std::vector<float> bn_scale;  // out_dim, strictly positive
  std::vector<float> bn_shift;  // out_dim

  // Per-tensor storage params when the weights are kept quantized on disk.
  std::optional<QuantParams> stored_weight_q;

  std::size_t spliced_dim() const { return in_dim * context_offsets.size(); }
  std::size_t weight_param_count() const {
    return kind == LayerKind::dense ? out_dim * spliced_dim() : rank * (out_dim + spliced_dim());
  }
  // Dense view of the layer map; for factorized layers the composed A*B.
  Matrix effective_weights() const;
  void validate() const;
};

struct TdnnModel {
  std::vector<TdnnLayer> layers;
  Matrix output_weights;  // classes x hidden
  std::vector<float> output_bias;
  std::optional<QuantParams> stored_head_q;
  HeadKind head_kind = HeadKind::toy;
  std::map<std::string, std::string> metadata;

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().in_dim; }
  std::size_t output_dim() const { return output_weights.rows; }
  std::size_t param_count() const;
  // Bytes of serialized weight-matrix payloads (biases, batch-norm terms and
  // structural metadata excluded). float32 storage counts 4 bytes/element,
  // int16 2, int8 1.
  std::size_t weight_payload_bytes() const;
  std::size_t float32_weight_payload_bytes() const;
  void validate() const;
};

// Context splicing: row t of the result concatenates frames[clamp(t + o)]
// over the offsets. Edges clamp to the first/last frame.
Matrix splice(const Matrix& frames, const std::vector<std::int32_t>& offsets);

// Gradient of splice: scatter-adds spliced-row gradients back onto frames.
Matrix splice_backward(const Matrix& grad_spliced, std::size_t frames_rows, std::size_t frame_dim,
                       const std::vector<std::int32_t>& offsets);

void relu_inplace(Matrix& m);
void add_bias_inplace(Matrix& m, const std::vector<float>& bias);
void bn_affine_inplace(Matrix& m, const std::vector<float>& scale, const std::vector<float>& shift);
void log_softmax_rows_inplace(Matrix& m);

// Float32 reference forward pass: per layer splice -> W x -> +bias -> ReLU
// -> batch-norm affine, then the output head and a row-wise log-softmax.
Matrix forward_float(const TdnnModel& model, const Matrix& features);

// Inference scheme for quantized weight+activation execution.
//   custom:  float-output integer matmul, symmetric activations.
//   requant: integer-output matmul, output dequantized before the bias add.
enum class QuantScheme : std::uint8_t { custom = 1, requant = 2 };

// A model paired with per-layer activation (and, for the requant scheme,
// output) quantization parameters. Entry i covers layer i's spliced input;
// the final entry covers the output head input.
struct QuantizedModel {
  TdnnModel model;
  QuantScheme scheme = QuantScheme::custom;
  std::vector<QuantParams> act_params;
  std::vector<QuantParams> out_params;  // requant scheme only

  void validate() const;
};

// Integer-arithmetic forward pass. Layer convolutions run through the
// integer kernels; bias add, ReLU, batch-norm and log-softmax stay float.
Matrix forward_quantized(const QuantizedModel& qm, const Matrix& features);

// Plans are weight-derived and reusable across inputs; callers running many
// batches build them once.
struct QuantForwardPlans {
  std::vector<IntConvPlan> layer_plans;
  IntConvPlan head_plan;
};
QuantForwardPlans build_forward_plans(const QuantizedModel& qm);
Matrix forward_quantized_with_plans(const QuantizedModel& qm, const QuantForwardPlans& plans, const Matrix& features);

const char* head_kind_name(HeadKind k);
const char* quant_scheme_name(QuantScheme s);

}  // namespace tdnnq
