// SPDX-License-Identifier: Apache-2.0

#include "ptq/ptq.hpp"

#include <cmath>

namespace tdnnq {

void CalibrationStats::validate(std::size_t n_layers) const {
  if (frames_seen == 0) raise(ErrorKind::invalid_input, "calibration stats: no frames seen");
  if (layer_inputs.size() != n_layers + 1 || layer_products.size() != n_layers + 1)
    raise(ErrorKind::invalid_argument, "calibration stats: missing layer coverage");
  for (const auto& s : layer_inputs) s.validate();
  for (const auto& s : layer_products) s.validate();
}

namespace {

void update_range(RangeStats& stats, const Matrix& m, char& seeded) {
  for (float v : m.data) {
    if (!seeded) {
      stats.min = v;
      stats.max = v;
      seeded = 1;
    } else {
      stats.update(v);
    }
  }
}

void require_dense(const TdnnModel& model, const char* op) {
  for (const auto& l : model.layers)
    if (l.kind != LayerKind::dense)
      raise(ErrorKind::invalid_argument, std::string(op) + ": factorized layers are not quantizable");
}

}  // namespace

CalibrationStats calibrate(const TdnnModel& model, const FeatureSet& calibration) {
  model.validate();
  if (calibration.utterances.empty()) raise(ErrorKind::invalid_input, "calibrate: empty calibration set");

  const std::size_t n = model.layers.size();
  CalibrationStats stats;
  stats.layer_inputs.assign(n + 1, RangeStats{});
  stats.layer_products.assign(n + 1, RangeStats{});
  std::vector<char> in_seeded(n + 1, 0), prod_seeded(n + 1, 0);

  for (const auto& utt : calibration.utterances) {
    Matrix x = utt;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& layer = model.layers[i];
      Matrix spliced = splice(x, layer.context_offsets);
      update_range(stats.layer_inputs[i], spliced, in_seeded[i]);
      Matrix y = matmul_nt(spliced, layer.effective_weights());
      update_range(stats.layer_products[i], y, prod_seeded[i]);
      add_bias_inplace(y, layer.bias);
      relu_inplace(y);
      bn_affine_inplace(y, layer.bn_scale, layer.bn_shift);
      x = std::move(y);
    }
    update_range(stats.layer_inputs[n], x, in_seeded[n]);
    Matrix logits = matmul_nt(x, model.output_weights);
    update_range(stats.layer_products[n], logits, prod_seeded[n]);
    stats.frames_seen += utt.rows;
  }
  return stats;
}

TdnnModel quantize_weights_only(const TdnnModel& model, QuantBits bits) {
  model.validate();
  require_dense(model, "quantize_weights_only");
  TdnnModel out = model;
  for (auto& layer : out.layers) {
    const QuantParams p = compute_qparams(RangeStats::of(layer.weights.data), bits, QuantMode::symmetric);
    layer.weights.data = fake_quantize(layer.weights.data, p);
    layer.stored_weight_q = p;
  }
  const QuantParams hp = compute_qparams(RangeStats::of(out.output_weights.data), bits, QuantMode::symmetric);
  out.output_weights.data = fake_quantize(out.output_weights.data, hp);
  out.stored_head_q = hp;
  return out;
}

FullQuantResult quantize_full(const TdnnModel& model, const CalibrationStats& stats, QuantBits bits,
                              QuantScheme scheme, std::optional<QuantBits> act_bits) {
  model.validate();
  require_dense(model, "quantize_full");
  stats.validate(model.layers.size());

  const QuantBits abits = act_bits.value_or(bits);
  const QuantMode act_mode = scheme == QuantScheme::custom ? QuantMode::symmetric : QuantMode::asymmetric;

  FullQuantResult result;
  result.qmodel.model = quantize_weights_only(model, bits);
  result.qmodel.scheme = scheme;

  const std::size_t n = model.layers.size();
  for (std::size_t i = 0; i <= n; ++i) {
    LayerQuantRecord rec;
    rec.name = i < n ? "layer" + std::to_string(i) : "head";
    rec.weight_params = i < n ? *result.qmodel.model.layers[i].stored_weight_q : *result.qmodel.model.stored_head_q;
    rec.observed_input = stats.layer_inputs[i];
    rec.act_params = compute_qparams(stats.layer_inputs[i], abits, act_mode);
    result.qmodel.act_params.push_back(*rec.act_params);
    if (scheme == QuantScheme::requant) {
      rec.out_params = compute_qparams(stats.layer_products[i], abits, QuantMode::asymmetric);
      result.qmodel.out_params.push_back(*rec.out_params);
    }
    result.records.push_back(std::move(rec));
  }
  result.qmodel.validate();
  return result;
}

QuantizationOutcome apply_quantization(const TdnnModel& model, const QuantConfig& config,
                                       const CalibrationStats* stats) {
  QuantizationOutcome out;
  if (!config.act_bits) {
    TdnnModel q = quantize_weights_only(model, config.weight_bits);
    for (std::size_t i = 0; i < q.layers.size(); ++i) {
      LayerQuantRecord rec;
      rec.name = "layer" + std::to_string(i);
      rec.weight_params = *q.layers[i].stored_weight_q;
      rec.observed_input = RangeStats::of(model.layers[i].weights.data);
      out.records.push_back(std::move(rec));
    }
    LayerQuantRecord head;
    head.name = "head";
    head.weight_params = *q.stored_head_q;
    head.observed_input = RangeStats::of(model.output_weights.data);
    out.records.push_back(std::move(head));
    out.file = ModelFile::plain(std::move(q));
    return out;
  }
  if (!stats) raise(ErrorKind::invalid_argument, "apply_quantization: activation quantization needs calibration stats");
  FullQuantResult res = quantize_full(model, *stats, config.weight_bits, config.scheme, config.act_bits);
  out.records = std::move(res.records);
  out.file = ModelFile::bundle(res.qmodel);
  return out;
}

std::vector<std::size_t> audit_saturations(const TdnnModel& model, const std::vector<QuantParams>& act_params,
                                           const FeatureSet& features) {
  model.validate();
  const std::size_t n = model.layers.size();
  if (act_params.size() != n + 1) raise(ErrorKind::invalid_argument, "audit_saturations: need params per layer plus head");
  std::vector<std::size_t> counts(n + 1, 0);

  auto count_clipped = [](const Matrix& m, const QuantParams& p) {
    std::size_t c = 0;
    for (float v : m.data) {
      const double q = std::nearbyint(v / p.scale) + p.zero_point;
      if (q < p.q_min() || q > p.q_max()) ++c;
    }
    return c;
  };

  // Saturation is checked against float-path activations, the same values
  // a calibration pass over this model observes.
  for (const auto& utt : features.utterances) {
    Matrix x = utt;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& layer = model.layers[i];
      Matrix spliced = splice(x, layer.context_offsets);
      counts[i] += count_clipped(spliced, act_params[i]);
      Matrix y = matmul_nt(spliced, layer.effective_weights());
      add_bias_inplace(y, layer.bias);
      relu_inplace(y);
      bn_affine_inplace(y, layer.bn_scale, layer.bn_shift);
      x = std::move(y);
    }
    counts[n] += count_clipped(x, act_params[n]);
  }
  return counts;
}

}  // namespace tdnnq
