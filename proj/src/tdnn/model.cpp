// SPDX-License-Identifier: Apache-2.0

#include "tdnn/model.hpp"

#include <cmath>

namespace tdnnq {

Matrix TdnnLayer::effective_weights() const {
  if (kind == LayerKind::dense) return weights;
  return matmul_nn(factor_a, factor_b);
}

void TdnnLayer::validate() const {
  if (in_dim == 0 || out_dim == 0) raise(ErrorKind::dimension, "layer: zero dimension");
  if (context_offsets.empty()) raise(ErrorKind::dimension, "layer: empty context");
  for (std::size_t i = 1; i < context_offsets.size(); ++i)
    if (context_offsets[i] <= context_offsets[i - 1])
      raise(ErrorKind::invalid_input, "layer: context offsets must be strictly increasing");

  if (kind == LayerKind::dense) {
    if (weights.rows != out_dim || weights.cols != spliced_dim())
      raise(ErrorKind::dimension, "layer: weight shape does not match out_dim x (in_dim * |context|)");
  } else {
    if (rank == 0 || rank > std::min(out_dim, spliced_dim()))
      raise(ErrorKind::dimension, "layer: factor rank out of range");
    if (factor_a.rows != out_dim || factor_a.cols != rank || factor_b.rows != rank || factor_b.cols != spliced_dim())
      raise(ErrorKind::dimension, "layer: factor shapes inconsistent");
  }
  if (bias.size() != out_dim || bn_scale.size() != out_dim || bn_shift.size() != out_dim)
    raise(ErrorKind::dimension, "layer: bias/batch-norm vector length does not match out_dim");
  for (float s : bn_scale)
    if (!(s > 0.0f)) raise(ErrorKind::invalid_input, "layer: batch-norm scale must be strictly positive");
}

std::size_t TdnnModel::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight_param_count() + l.bias.size() + l.bn_scale.size() + l.bn_shift.size();
  n += output_weights.size() + output_bias.size();
  return n;
}

namespace {

std::size_t storage_bytes_per_elem(const std::optional<QuantParams>& q) {
  if (!q) return 4;
  return q->bits == QuantBits::b8 ? 1 : 2;
}

}  // namespace

std::size_t TdnnModel::weight_payload_bytes() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight_param_count() * storage_bytes_per_elem(l.stored_weight_q);
  n += output_weights.size() * storage_bytes_per_elem(stored_head_q);
  return n;
}

std::size_t TdnnModel::float32_weight_payload_bytes() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight_param_count() * 4;
  n += output_weights.size() * 4;
  return n;
}

void TdnnModel::validate() const {
  if (layers.empty()) raise(ErrorKind::dimension, "model: no layers");
  for (const auto& l : layers) l.validate();
  for (std::size_t i = 1; i < layers.size(); ++i)
    if (layers[i].in_dim != layers[i - 1].out_dim)
      raise(ErrorKind::dimension, "model: layer " + std::to_string(i) + " input dim does not match previous output");
  if (output_weights.cols != layers.back().out_dim)
    raise(ErrorKind::dimension, "model: output head input dim does not match last layer");
  if (output_bias.size() != output_weights.rows) raise(ErrorKind::dimension, "model: output bias length mismatch");

  // Reference geometries from the acoustic-model configuration; toy models
  // are unrestricted.
  if (head_kind != HeadKind::toy) {
    const std::size_t want_out = head_kind == HeadKind::monophone ? 41 : 5984;
    if (layers.size() != 7) raise(ErrorKind::dimension, "model: reference geometry requires 7 layers");
    for (const auto& l : layers)
      if (l.out_dim != 625) raise(ErrorKind::dimension, "model: reference geometry requires hidden dim 625");
    if (output_dim() != want_out)
      raise(ErrorKind::dimension, "model: reference head requires " + std::to_string(want_out) + " outputs");
  }
}

Matrix splice(const Matrix& frames, const std::vector<std::int32_t>& offsets) {
  if (frames.rows == 0) raise(ErrorKind::invalid_input, "splice: empty input");
  if (offsets.empty()) raise(ErrorKind::invalid_input, "splice: empty offsets");
  const std::size_t t_max = frames.rows - 1;
  Matrix out(frames.rows, frames.cols * offsets.size());
  for (std::size_t t = 0; t < frames.rows; ++t) {
    float* dst = out.row(t);
    for (std::size_t c = 0; c < offsets.size(); ++c) {
      std::int64_t src = static_cast<std::int64_t>(t) + offsets[c];
      if (src < 0) src = 0;
      if (src > static_cast<std::int64_t>(t_max)) src = static_cast<std::int64_t>(t_max);
      const float* s = frames.row(static_cast<std::size_t>(src));
      for (std::size_t d = 0; d < frames.cols; ++d) dst[c * frames.cols + d] = s[d];
    }
  }
  return out;
}

Matrix splice_backward(const Matrix& grad_spliced, std::size_t frames_rows, std::size_t frame_dim,
                       const std::vector<std::int32_t>& offsets) {
  if (grad_spliced.rows != frames_rows || grad_spliced.cols != frame_dim * offsets.size())
    raise(ErrorKind::dimension, "splice_backward: gradient shape mismatch");
  const std::size_t t_max = frames_rows - 1;
  Matrix out(frames_rows, frame_dim);
  for (std::size_t t = 0; t < frames_rows; ++t) {
    const float* g = grad_spliced.row(t);
    for (std::size_t c = 0; c < offsets.size(); ++c) {
      std::int64_t src = static_cast<std::int64_t>(t) + offsets[c];
      if (src < 0) src = 0;
      if (src > static_cast<std::int64_t>(t_max)) src = static_cast<std::int64_t>(t_max);
      float* dst = out.row(static_cast<std::size_t>(src));
      for (std::size_t d = 0; d < frame_dim; ++d) dst[d] += g[c * frame_dim + d];
    }
  }
  return out;
}

void relu_inplace(Matrix& m) {
  for (float& v : m.data)
    if (v < 0.0f) v = 0.0f;
}

void add_bias_inplace(Matrix& m, const std::vector<float>& bias) {
  if (bias.size() != m.cols) raise(ErrorKind::dimension, "bias length does not match columns");
  for (std::size_t r = 0; r < m.rows; ++r) {
    float* row = m.row(r);
    for (std::size_t c = 0; c < m.cols; ++c) row[c] += bias[c];
  }
}

void bn_affine_inplace(Matrix& m, const std::vector<float>& scale, const std::vector<float>& shift) {
  if (scale.size() != m.cols || shift.size() != m.cols) raise(ErrorKind::dimension, "batch-norm vector length mismatch");
  for (std::size_t r = 0; r < m.rows; ++r) {
    float* row = m.row(r);
    for (std::size_t c = 0; c < m.cols; ++c) row[c] = row[c] * scale[c] + shift[c];
  }
}

void log_softmax_rows_inplace(Matrix& m) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    float* row = m.row(r);
    float mx = row[0];
    for (std::size_t c = 1; c < m.cols; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < m.cols; ++c) sum += std::exp(static_cast<double>(row[c]) - mx);
    const float lse = mx + static_cast<float>(std::log(sum));
    for (std::size_t c = 0; c < m.cols; ++c) row[c] -= lse;
  }
}

Matrix forward_float(const TdnnModel& model, const Matrix& features) {
  if (features.cols != model.input_dim()) raise(ErrorKind::dimension, "forward: feature dim does not match model input");
  Matrix x = features;
  for (const auto& layer : model.layers) {
    Matrix spliced = splice(x, layer.context_offsets);
    Matrix y;
    if (layer.kind == LayerKind::dense) {
      y = matmul_nt(spliced, layer.weights);
    } else {
      // Compose B then A; never materializes the dense product.
      Matrix h = matmul_nt(spliced, layer.factor_b);  // frames x rank
      y = matmul_nt(h, layer.factor_a);               // frames x out_dim
    }
    add_bias_inplace(y, layer.bias);
    relu_inplace(y);
    bn_affine_inplace(y, layer.bn_scale, layer.bn_shift);
    x = std::move(y);
  }
  Matrix logits = matmul_nt(x, model.output_weights);
  add_bias_inplace(logits, model.output_bias);
  log_softmax_rows_inplace(logits);
  return logits;
}

void QuantizedModel::validate() const {
  model.validate();
  const std::size_t want = model.layers.size() + 1;
  if (act_params.size() != want)
    raise(ErrorKind::invalid_argument, "quantized model: missing activation params (need one per layer plus head)");
  for (const auto& p : act_params) p.validate();
  if (scheme == QuantScheme::requant) {
    if (out_params.size() != want)
      raise(ErrorKind::invalid_argument, "quantized model: requant scheme needs output params per layer plus head");
    for (const auto& p : out_params) p.validate();
  }
}

QuantForwardPlans build_forward_plans(const QuantizedModel& qm) {
  qm.validate();
  QuantForwardPlans plans;
  const bool requant = qm.scheme == QuantScheme::requant;
  for (std::size_t i = 0; i < qm.model.layers.size(); ++i) {
    const auto& layer = qm.model.layers[i];
    if (!layer.stored_weight_q)
      raise(ErrorKind::invalid_argument, "quantized model: layer " + std::to_string(i) + " has no weight quantization");
    plans.layer_plans.push_back(build_plan(layer.effective_weights(), *layer.stored_weight_q, qm.act_params[i],
                                           requant ? std::optional<QuantParams>(qm.out_params[i]) : std::nullopt));
  }
  if (!qm.model.stored_head_q) raise(ErrorKind::invalid_argument, "quantized model: head has no weight quantization");
  const std::size_t h = qm.model.layers.size();
  plans.head_plan = build_plan(qm.model.output_weights, *qm.model.stored_head_q, qm.act_params[h],
                               requant ? std::optional<QuantParams>(qm.out_params[h]) : std::nullopt);
  return plans;
}

namespace {

Matrix quantized_affine(const IntConvPlan& plan, const Matrix& acts, bool requant) {
  QuantizedTensor q = quantize(std::span<const float>(acts.data), plan.act_params);
  q.shape = {acts.rows, acts.cols};
  if (!requant) return conv1d_int(plan, q);
  const ActRowSums a1 = compute_row_sums(q, plan.inner_dim);
  QuantizedTensor q3 = int_matmul_requant(plan, q, a1);
  Matrix out(acts.rows, plan.out_dim);
  for (std::size_t i = 0; i < q3.data.size(); ++i) out.data[i] = dequantize_value(q3.data[i], q3.params);
  return out;
}

}  // namespace

Matrix forward_quantized_with_plans(const QuantizedModel& qm, const QuantForwardPlans& plans, const Matrix& features) {
  if (features.cols != qm.model.input_dim()) raise(ErrorKind::dimension, "forward: feature dim does not match model input");
  const bool requant = qm.scheme == QuantScheme::requant;
  Matrix x = features;
  for (std::size_t i = 0; i < qm.model.layers.size(); ++i) {
    const auto& layer = qm.model.layers[i];
    Matrix spliced = splice(x, layer.context_offsets);
    Matrix y = quantized_affine(plans.layer_plans[i], spliced, requant);
    add_bias_inplace(y, layer.bias);
    relu_inplace(y);
    bn_affine_inplace(y, layer.bn_scale, layer.bn_shift);
    x = std::move(y);
  }
  Matrix logits = quantized_affine(plans.head_plan, x, requant);
  add_bias_inplace(logits, qm.model.output_bias);
  log_softmax_rows_inplace(logits);
  return logits;
}

Matrix forward_quantized(const QuantizedModel& qm, const Matrix& features) {
  const QuantForwardPlans plans = build_forward_plans(qm);
  return forward_quantized_with_plans(qm, plans, features);
}

const char* head_kind_name(HeadKind k) {
  switch (k) {
    case HeadKind::toy: return "toy";
    case HeadKind::monophone: return "monophone";
    case HeadKind::biphone: return "biphone";
  }
  return "unknown";
}

const char* quant_scheme_name(QuantScheme s) {
  return s == QuantScheme::custom ? "full-custom" : "full-requant";
}

}  // namespace tdnnq
