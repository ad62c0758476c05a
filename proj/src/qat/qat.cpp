// SPDX-License-Identifier: Apache-2.0

#include "qat/qat.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "common/binio.hpp"
#include "common/logging.hpp"
#include "tdnn/eval.hpp"

namespace tdnnq {

// ---------------------------------------------------------------------------
// Schedule and observers
// ---------------------------------------------------------------------------

void QatSchedule::validate() const {
  if (kind == ScheduleKind::final_iterations && !(activate_after_fraction >= 0.0 && activate_after_fraction < 1.0))
    raise(ErrorKind::config, "qat schedule: activate_after_fraction must be in [0, 1)");
  if (!(observer_momentum > 0.0 && observer_momentum <= 1.0))
    raise(ErrorKind::config, "qat schedule: observer_momentum must be in (0, 1]");
}

bool QatSchedule::active(std::int64_t step, std::int64_t total_steps) const {
  if (kind == ScheduleKind::full_epoch) return true;
  const auto first_active = static_cast<std::int64_t>(activate_after_fraction * static_cast<double>(total_steps));
  return step >= first_active;
}

void RangeObserver::observe(const RangeStats& batch, double momentum) {
  if (!initialized) {
    min = batch.min;
    max = batch.max;
    initialized = true;
    return;
  }
  min = std::min(batch.min, momentum * min + (1.0 - momentum) * batch.min);
  max = std::max(batch.max, momentum * max + (1.0 - momentum) * batch.max);
}

RangeStats RangeObserver::range() const {
  if (!initialized) raise(ErrorKind::invalid_argument, "range observer was never updated");
  return RangeStats{min, max};
}

std::vector<RangeStats> observer_ranges(const QatState& state) {
  std::vector<RangeStats> out;
  out.reserve(state.act_observers.size());
  for (const auto& ob : state.act_observers) out.push_back(ob.range());
  return out;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

namespace {

// fake_quantize, or its clamp-only surrogate whose exact derivative the
// straight-through estimator is.
void apply_fq(std::vector<float>& xs, const QuantParams& p, bool no_round) {
  if (!no_round) {
    xs = fake_quantize(xs, p);
    return;
  }
  const float lo = static_cast<float>(p.real_min()), hi = static_cast<float>(p.real_max());
  for (auto& x : xs) x = std::clamp(x, lo, hi);
}

QuantParams weight_qparams(const Matrix& w, QuantBits bits) {
  return compute_qparams(RangeStats::of(w.data), bits, QuantMode::symmetric);
}

constexpr float kBnScaleFloor = 1e-3f;

}  // namespace

struct Trainer::Grads {
  struct LayerGrads {
    Matrix w, a, b;
    std::vector<float> bias, bn_scale, bn_shift;
  };
  std::vector<LayerGrads> layers;
  Matrix head_w;
  std::vector<float> head_b;

  void reset(const TdnnModel& m) {
    layers.resize(m.layers.size());
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
      const auto& l = m.layers[i];
      auto& g = layers[i];
      if (l.kind == LayerKind::dense) {
        g.w = Matrix(l.weights.rows, l.weights.cols);
      } else {
        g.a = Matrix(l.factor_a.rows, l.factor_a.cols);
        g.b = Matrix(l.factor_b.rows, l.factor_b.cols);
      }
      g.bias.assign(l.out_dim, 0.0f);
      g.bn_scale.assign(l.out_dim, 0.0f);
      g.bn_shift.assign(l.out_dim, 0.0f);
    }
    head_w = Matrix(m.output_weights.rows, m.output_weights.cols);
    head_b.assign(m.output_bias.size(), 0.0f);
  }
};

Trainer::Trainer(TdnnModel model, double learning_rate) : model_(std::move(model)), learning_rate_(learning_rate) {
  model_.validate();
}

void Trainer::forward_backward(const Matrix& feats, const std::vector<std::int32_t>& labels, const QatOptions& qat,
                               QatState* state, bool quant_live, double inv_total_frames, Grads& grads,
                               double& loss_sum) {
  const std::size_t n_layers = model_.layers.size();

  // Weights do not change within a batch, so the effective (possibly
  // fake-quantized) operands are identical for every utterance.
  std::vector<Matrix> w_eff(n_layers);
  std::vector<QuantParams> w_params(n_layers);
  Matrix head_eff = model_.output_weights;
  QuantParams head_w_params;
  for (std::size_t i = 0; i < n_layers; ++i) {
    const auto& l = model_.layers[i];
    if (l.kind == LayerKind::dense) {
      w_eff[i] = l.weights;
      if (quant_live) {
        w_params[i] = weight_qparams(l.weights, qat.bits);
        apply_fq(w_eff[i].data, w_params[i], qat.surrogate_no_round);
      }
    }
  }
  if (quant_live) {
    head_w_params = weight_qparams(model_.output_weights, qat.bits);
    apply_fq(head_eff.data, head_w_params, qat.surrogate_no_round);
  }

  // Forward with caches.
  std::vector<Matrix> spliced(n_layers), spliced_eff(n_layers), z_bias(n_layers), post_relu(n_layers);
  std::vector<Matrix> factor_mid(n_layers);
  std::vector<QuantParams> act_params(n_layers + 1);
  Matrix x = feats;
  for (std::size_t i = 0; i < n_layers; ++i) {
    const auto& l = model_.layers[i];
    spliced[i] = splice(x, l.context_offsets);
    spliced_eff[i] = spliced[i];
    if (qat.enabled && state && !qat.freeze_observers) {
      state->act_observers[i].observe(RangeStats::of(spliced[i].data), qat.schedule.observer_momentum);
    }
    if (quant_live) {
      act_params[i] = compute_qparams(state->act_observers[i].range(), qat.bits, QuantMode::symmetric);
      apply_fq(spliced_eff[i].data, act_params[i], qat.surrogate_no_round);
    }
    Matrix z;
    if (l.kind == LayerKind::dense) {
      z = matmul_nt(spliced_eff[i], w_eff[i]);
    } else {
      if (quant_live) raise(ErrorKind::invalid_argument, "qat: factorized layers cannot be fake quantized");
      factor_mid[i] = matmul_nt(spliced_eff[i], l.factor_b);  // frames x rank
      z = matmul_nt(factor_mid[i], l.factor_a);               // frames x out_dim
    }
    add_bias_inplace(z, l.bias);
    z_bias[i] = z;
    relu_inplace(z);
    post_relu[i] = z;
    bn_affine_inplace(z, l.bn_scale, l.bn_shift);
    x = std::move(z);
  }

  Matrix head_in = x;
  if (qat.enabled && state && !qat.freeze_observers) {
    state->act_observers[n_layers].observe(RangeStats::of(head_in.data), qat.schedule.observer_momentum);
  }
  Matrix head_in_eff = head_in;
  if (quant_live) {
    act_params[n_layers] = compute_qparams(state->act_observers[n_layers].range(), qat.bits, QuantMode::symmetric);
    apply_fq(head_in_eff.data, act_params[n_layers], qat.surrogate_no_round);
  }
  Matrix logits = matmul_nt(head_in_eff, head_eff);
  add_bias_inplace(logits, model_.output_bias);

  // Row-wise log-softmax and cross-entropy.
  const std::size_t frames = logits.rows;
  const std::size_t classes = logits.cols;
  Matrix dlogits(frames, classes);
  for (std::size_t t = 0; t < frames; ++t) {
    const std::int32_t label = labels[t];
    if (label < 0 || static_cast<std::size_t>(label) >= classes)
      raise(ErrorKind::invalid_input, "train: label out of range");
    float* row = logits.row(t);
    float mx = row[0];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(static_cast<double>(row[c]) - mx);
    const double lse = mx + std::log(sum);
    loss_sum += lse - row[label];
    float* drow = dlogits.row(t);
    for (std::size_t c = 0; c < classes; ++c) {
      const double softmax = std::exp(static_cast<double>(row[c]) - lse);
      drow[c] = static_cast<float>((softmax - (static_cast<std::int32_t>(c) == label ? 1.0 : 0.0)) * inv_total_frames);
    }
  }

  // Head backward.
  {
    Matrix gw = matmul_tn(dlogits, head_in_eff);  // classes x hidden
    for (std::size_t i = 0; i < grads.head_w.size(); ++i) grads.head_w.data[i] += gw.data[i];
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t c = 0; c < classes; ++c) grads.head_b[c] += dlogits.at(t, c);
  }
  Matrix dx = matmul_nn(dlogits, head_eff);  // frames x hidden
  if (quant_live) {
    for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] *= ste_mask(head_in.data[i], act_params[n_layers]);
  }

  // Layer backward, last to first.
  for (std::size_t ii = n_layers; ii-- > 0;) {
    const auto& l = model_.layers[ii];
    auto& g = grads.layers[ii];
    // Batch-norm affine: y = scale * r + shift.
    Matrix dr(dx.rows, dx.cols);
    for (std::size_t t = 0; t < dx.rows; ++t) {
      const float* dyr = dx.row(t);
      const float* rr = post_relu[ii].row(t);
      float* drr = dr.row(t);
      for (std::size_t c = 0; c < dx.cols; ++c) {
        g.bn_scale[c] += dyr[c] * rr[c];
        g.bn_shift[c] += dyr[c];
        drr[c] = dyr[c] * l.bn_scale[c];
      }
    }
    // ReLU.
    for (std::size_t i = 0; i < dr.size(); ++i)
      if (z_bias[ii].data[i] <= 0.0f) dr.data[i] = 0.0f;
    // Bias.
    for (std::size_t t = 0; t < dr.rows; ++t)
      for (std::size_t c = 0; c < dr.cols; ++c) g.bias[c] += dr.at(t, c);
    // Affine map.
    Matrix dspliced_eff;
    if (l.kind == LayerKind::dense) {
      Matrix gw = matmul_tn(dr, spliced_eff[ii]);  // out x spliced_dim
      for (std::size_t i = 0; i < g.w.size(); ++i) g.w.data[i] += gw.data[i];
      dspliced_eff = matmul_nn(dr, w_eff[ii]);
    } else {
      // z = (spliced * B^T) * A^T
      Matrix ga = matmul_tn(dr, factor_mid[ii]);  // out x rank
      for (std::size_t i = 0; i < g.a.size(); ++i) g.a.data[i] += ga.data[i];
      Matrix dmid = matmul_nn(dr, l.factor_a);  // frames x rank
      Matrix gb = matmul_tn(dmid, spliced_eff[ii]);
      for (std::size_t i = 0; i < g.b.size(); ++i) g.b.data[i] += gb.data[i];
      dspliced_eff = matmul_nn(dmid, l.factor_b);
    }
    if (quant_live) {
      for (std::size_t i = 0; i < dspliced_eff.size(); ++i)
        dspliced_eff.data[i] *= ste_mask(spliced[ii].data[i], act_params[ii]);
    }
    dx = splice_backward(dspliced_eff, ii == 0 ? feats.rows : post_relu[ii - 1].rows,
                         l.in_dim, l.context_offsets);
  }

  // Weight STE masks: gradients through fake-quantized weights vanish where
  // the pre-quantization weight saturated.
  if (quant_live) {
    for (std::size_t i = 0; i < n_layers; ++i) {
      const auto& l = model_.layers[i];
      if (l.kind != LayerKind::dense) continue;
      auto& g = grads.layers[i];
      for (std::size_t j = 0; j < g.w.size(); ++j) g.w.data[j] *= ste_mask(l.weights.data[j], w_params[i]);
    }
    for (std::size_t j = 0; j < grads.head_w.size(); ++j)
      grads.head_w.data[j] *= ste_mask(model_.output_weights.data[j], head_w_params);
  }
}

namespace {

void adam_update_tensor(std::vector<float>& param, const std::vector<float>& grad, std::vector<float>& m,
                        std::vector<float>& v, std::int64_t t, double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * g);
    v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * g * g);
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    param[i] = static_cast<float>(param[i] - lr * mhat / (std::sqrt(vhat) + eps));
  }
}

}  // namespace

std::vector<std::vector<float>*> Trainer::parameter_tensors() {
  std::vector<std::vector<float>*> params;
  for (auto& l : model_.layers) {
    if (l.kind == LayerKind::dense) {
      params.push_back(&l.weights.data);
    } else {
      params.push_back(&l.factor_a.data);
      params.push_back(&l.factor_b.data);
    }
    params.push_back(&l.bias);
    params.push_back(&l.bn_scale);
    params.push_back(&l.bn_shift);
  }
  params.push_back(&model_.output_weights.data);
  params.push_back(&model_.output_bias);
  return params;
}

Trainer::GradientResult Trainer::compute_gradients(const TrainBatch& batch, const QatOptions& qat, QatState* state) {
  if (batch.features.empty() || batch.features.size() != batch.labels.size())
    raise(ErrorKind::invalid_argument, "train step: malformed batch");
  if (qat.enabled) {
    if (!state) raise(ErrorKind::invalid_argument, "train step: QAT requires state");
    qat.schedule.validate();
    if (state->act_observers.size() != model_.layers.size() + 1)
      state->act_observers.assign(model_.layers.size() + 1, RangeObserver{});
  }
  const bool quant_live = qat.enabled && qat.schedule.active(state->step, state->total_steps);

  std::size_t total_frames = 0;
  for (const auto* f : batch.features) total_frames += f->rows;
  const double inv_total = 1.0 / static_cast<double>(total_frames);

  Grads grads;
  grads.reset(model_);
  double loss_sum = 0.0;
  for (std::size_t u = 0; u < batch.features.size(); ++u)
    forward_backward(*batch.features[u], *batch.labels[u], qat, state, quant_live, inv_total, grads, loss_sum);

  GradientResult result;
  result.loss = loss_sum / static_cast<double>(total_frames);
  for (std::size_t i = 0; i < model_.layers.size(); ++i) {
    auto& g = grads.layers[i];
    if (model_.layers[i].kind == LayerKind::dense) {
      result.grads.push_back(std::move(g.w.data));
    } else {
      result.grads.push_back(std::move(g.a.data));
      result.grads.push_back(std::move(g.b.data));
    }
    result.grads.push_back(std::move(g.bias));
    result.grads.push_back(std::move(g.bn_scale));
    result.grads.push_back(std::move(g.bn_shift));
  }
  result.grads.push_back(std::move(grads.head_w.data));
  result.grads.push_back(std::move(grads.head_b));
  return result;
}

double Trainer::batch_loss(const TrainBatch& batch, const QatOptions& qat, QatState* state) {
  return compute_gradients(batch, qat, state).loss;
}

double Trainer::step(const TrainBatch& batch, const QatOptions& qat, QatState* state) {
  GradientResult gr = compute_gradients(batch, qat, state);
  if (!std::isfinite(gr.loss)) raise(ErrorKind::diverged, "train step: non-finite loss");

  const auto params = parameter_tensors();
  if (adam_.m.empty()) {
    adam_.m.resize(params.size());
    adam_.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      adam_.m[i].assign(params[i]->size(), 0.0f);
      adam_.v[i].assign(params[i]->size(), 0.0f);
    }
  }
  ++adam_.t;
  for (std::size_t i = 0; i < params.size(); ++i)
    adam_update_tensor(*params[i], gr.grads[i], adam_.m[i], adam_.v[i], adam_.t, learning_rate_);

  // Keep the batch-norm affine valid (strictly positive scale).
  for (auto& l : model_.layers)
    for (auto& s : l.bn_scale) s = std::max(s, kBnScaleFloor);

  if (state) ++state->step;
  return gr.loss;
}

// ---------------------------------------------------------------------------
// Toy task
// ---------------------------------------------------------------------------

void ToyTaskConfig::validate() const {
  if (input_dim == 0 || hidden_dim == 0 || num_layers == 0 || num_classes < 2)
    raise(ErrorKind::config, "toy config: bad geometry");
  if (latent_dim == 0 || latent_dim > input_dim) raise(ErrorKind::config, "toy config: bad latent dim");
  if (!(observation_noise >= 0.0)) raise(ErrorKind::config, "toy config: bad observation noise");
  if (num_anchors == 0 || dwell_frames == 0 || !(anchor_spread > 0.0) || !(within_cluster_std >= 0.0))
    raise(ErrorKind::config, "toy config: bad anchor structure");
  if (train_utterances == 0 || eval_utterances == 0 || calib_utterances == 0 || frames_per_utterance == 0)
    raise(ErrorKind::config, "toy config: empty data split");
  if (batch_utterances == 0 || epochs == 0) raise(ErrorKind::config, "toy config: bad training budget");
  if (!(learning_rate > 0.0) || !(qat_learning_rate > 0.0)) raise(ErrorKind::config, "toy config: bad learning rate");
  if (!(label_noise >= 0.0)) raise(ErrorKind::config, "toy config: bad label noise");
  qat_schedule.validate();
}

namespace {

constexpr std::uint64_t kTeacherStream = 0x7eac4e5;
constexpr std::uint64_t kStudentStream = 0x57dde27;
constexpr std::uint64_t kBatchStream = 0xba7c4;
constexpr std::uint64_t kLabelStream = 0x1abe1;
constexpr std::uint64_t kProbeSplit = 1000;

TdnnModel init_random_tdnn(std::size_t input_dim, std::size_t hidden, std::size_t n_layers, std::size_t classes,
                           const std::vector<std::int32_t>& ctx, std::uint64_t seed) {
  Rng rng(seed);
  TdnnModel m;
  std::size_t prev = input_dim;
  for (std::size_t i = 0; i < n_layers; ++i) {
    TdnnLayer l;
    l.in_dim = prev;
    l.out_dim = hidden;
    l.context_offsets = ctx;
    const double stddev = std::sqrt(2.0 / static_cast<double>(l.spliced_dim()));
    l.weights = Matrix(hidden, l.spliced_dim());
    for (auto& w : l.weights.data) w = static_cast<float>(stddev * rng.next_gaussian());
    l.bias.assign(hidden, 0.0f);
    l.bn_scale.assign(hidden, 1.0f);
    l.bn_shift.assign(hidden, 0.0f);
    m.layers.push_back(std::move(l));
    prev = hidden;
  }
  const double head_std = 1.0 / std::sqrt(static_cast<double>(prev));
  m.output_weights = Matrix(classes, prev);
  for (auto& w : m.output_weights.data) w = static_cast<float>(head_std * rng.next_gaussian());
  m.output_bias.assign(classes, 0.0f);
  m.head_kind = HeadKind::toy;
  return m;
}

constexpr std::uint64_t kLiftStream = 0x11f7;
constexpr std::uint64_t kAnchorStream = 0xa4c402;

// Fixed lift from the latent space into feature space, shared by all splits.
Matrix make_lift(const ToyTaskConfig& cfg) {
  Rng rng(mix_seed(cfg.seed, kLiftStream));
  Matrix lift(cfg.input_dim, cfg.latent_dim);
  const double s = 1.0 / std::sqrt(static_cast<double>(cfg.latent_dim));
  for (auto& v : lift.data) v = static_cast<float>(s * rng.next_gaussian());
  return lift;
}

Matrix make_anchors(const ToyTaskConfig& cfg) {
  Rng rng(mix_seed(cfg.seed, kAnchorStream));
  Matrix anchors(cfg.num_anchors, cfg.latent_dim);
  for (auto& v : anchors.data) v = static_cast<float>(cfg.anchor_spread * rng.next_gaussian());
  return anchors;
}

FeatureSet make_features(const ToyTaskConfig& cfg, std::uint64_t split, std::size_t n_utts) {
  constexpr double ar = 0.6;
  const double innov = std::sqrt(1.0 - ar * ar);
  const Matrix lift = make_lift(cfg);
  const Matrix anchors = make_anchors(cfg);
  FeatureSet fs;
  for (std::size_t u = 0; u < n_utts; ++u) {
    Rng rng(mix_seed(cfg.seed, split, u));
    std::vector<double> z(cfg.latent_dim, 0.0);
    const float* anchor = nullptr;
    Matrix m(cfg.frames_per_utterance, cfg.input_dim);
    for (std::size_t t = 0; t < m.rows; ++t) {
      const bool segment_start = t % cfg.dwell_frames == 0;
      if (segment_start) anchor = anchors.row(rng.next_index(cfg.num_anchors));
      for (std::size_t k = 0; k < cfg.latent_dim; ++k) {
        const double wobble = cfg.within_cluster_std * rng.next_gaussian();
        // Segments start on the new anchor; within a segment the latent
        // wobbles around it with AR smoothing.
        z[k] = segment_start ? anchor[k] + wobble : anchor[k] + ar * (z[k] - anchor[k]) + innov * wobble;
      }
      for (std::size_t d = 0; d < cfg.input_dim; ++d) {
        double x = 0.0;
        for (std::size_t k = 0; k < cfg.latent_dim; ++k) x += lift.at(d, k) * z[k];
        m.at(t, d) = static_cast<float>(x + cfg.observation_noise * rng.next_gaussian());
      }
    }
    fs.utterances.push_back(std::move(m));
  }
  return fs;
}

LabelSet make_labels(const ToyTaskConfig& cfg, const TdnnModel& teacher, const FeatureSet& fs, std::uint64_t split) {
  LabelSet ls;
  for (std::size_t u = 0; u < fs.utterances.size(); ++u) {
    Rng rng(mix_seed(cfg.seed, mix_seed(kLabelStream, split), u));
    const Matrix logits = forward_float(teacher, fs.utterances[u]);
    std::vector<std::int32_t> labels(logits.rows);
    for (std::size_t t = 0; t < logits.rows; ++t) {
      std::int32_t best = 0;
      double best_v = -1e300;
      for (std::size_t c = 0; c < logits.cols; ++c) {
        const double v = logits.at(t, c) + cfg.label_noise * rng.next_gaussian();
        if (v > best_v) {
          best_v = v;
          best = static_cast<std::int32_t>(c);
        }
      }
      labels[t] = best;
    }
    ls.utterances.push_back(std::move(labels));
  }
  return ls;
}

}  // namespace

TdnnModel make_teacher(const ToyTaskConfig& cfg) {
  TdnnModel teacher = init_random_tdnn(cfg.input_dim, cfg.teacher_hidden, cfg.teacher_layers, cfg.num_classes,
                                       cfg.context, mix_seed(cfg.seed, kTeacherStream));
  // Center the head bias on a probe set so no class dominates the argmax.
  const FeatureSet probe = make_features(cfg, kProbeSplit, 50);
  std::vector<double> mean(cfg.num_classes, 0.0);
  std::size_t frames = 0;
  for (const auto& utt : probe.utterances) {
    const Matrix logits = forward_float(teacher, utt);
    for (std::size_t t = 0; t < logits.rows; ++t)
      for (std::size_t c = 0; c < logits.cols; ++c) mean[c] += logits.at(t, c);
    frames += logits.rows;
  }
  for (std::size_t c = 0; c < cfg.num_classes; ++c)
    teacher.output_bias[c] -= static_cast<float>(mean[c] / static_cast<double>(frames));
  teacher.metadata["name"] = "toy-teacher";
  return teacher;
}

TdnnModel init_student(const ToyTaskConfig& cfg) {
  TdnnModel m = init_random_tdnn(cfg.input_dim, cfg.hidden_dim, cfg.num_layers, cfg.num_classes, cfg.context,
                                 mix_seed(cfg.seed, kStudentStream));
  m.metadata["name"] = "toy-tdnn";
  m.metadata["seed"] = std::to_string(cfg.seed);
  return m;
}

ToyData make_toy_data(const ToyTaskConfig& cfg) {
  cfg.validate();
  const TdnnModel teacher = make_teacher(cfg);
  ToyData d;
  d.train_x = make_features(cfg, 1, cfg.train_utterances);
  d.eval_x = make_features(cfg, 2, cfg.eval_utterances);
  d.calib_x = make_features(cfg, 3, cfg.calib_utterances);
  d.train_y = make_labels(cfg, teacher, d.train_x, 1);
  d.eval_y = make_labels(cfg, teacher, d.eval_x, 2);
  d.calib_y = make_labels(cfg, teacher, d.calib_x, 3);
  return d;
}

namespace {

std::vector<std::size_t> epoch_order(const ToyTaskConfig& cfg, std::size_t n, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(cfg.seed, kBatchStream, epoch));
  rng.shuffle(order);
  return order;
}

TrainBatch gather_batch(const FeatureSet& x, const LabelSet& y, const std::vector<std::size_t>& order,
                        std::size_t begin, std::size_t end) {
  TrainBatch b;
  for (std::size_t i = begin; i < end; ++i) {
    b.features.push_back(&x.utterances[order[i]]);
    b.labels.push_back(&y.utterances[order[i]]);
  }
  return b;
}

}  // namespace

TrainResult train_toy(const ToyTaskConfig& cfg) {
  cfg.validate();
  const ToyData data = make_toy_data(cfg);
  Trainer trainer(init_student(cfg), cfg.learning_rate);

  const std::size_t n = cfg.train_utterances;
  TrainResult result;
  const QatOptions no_qat;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(cfg, n, epoch);
    double loss_acc = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_utterances) {
      const std::size_t end = std::min(n, begin + cfg.batch_utterances);
      double loss;
      try {
        loss = trainer.step(gather_batch(data.train_x, data.train_y, order, begin, end), no_qat, nullptr);
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::diverged)
          raise(ErrorKind::diverged, "train_toy: diverged at epoch " + std::to_string(epoch) + " batch " +
                                         std::to_string(batches) + ": " + e.what());
        throw;
      }
      loss_acc += loss;
      ++batches;
    }
    result.epoch_losses.push_back(loss_acc / static_cast<double>(batches));
    result.eval_accuracy_curve.push_back(frame_accuracy_float(trainer.model(), data.eval_x, data.eval_y));
    log_debug("train_toy epoch " + std::to_string(epoch) + " loss " + std::to_string(result.epoch_losses.back()) +
              " eval acc " + std::to_string(result.eval_accuracy_curve.back()));
  }
  result.final_eval_accuracy = result.eval_accuracy_curve.back();
  result.model = trainer.take_model();
  result.model.metadata["trained"] = "float";
  return result;
}

QatRunResult qat_train(const TdnnModel& checkpoint, const ToyTaskConfig& cfg, std::int64_t max_steps,
                       const QatState* resume_state, const AdamState* resume_adam) {
  cfg.validate();
  const ToyData data = make_toy_data(cfg);
  Trainer trainer(checkpoint, cfg.qat_learning_rate);

  const std::size_t n = cfg.train_utterances;
  const std::int64_t steps_per_epoch =
      static_cast<std::int64_t>((n + cfg.batch_utterances - 1) / cfg.batch_utterances);
  const std::int64_t total_steps = steps_per_epoch * static_cast<std::int64_t>(cfg.qat_epochs);

  QatOptions qat;
  qat.enabled = true;
  qat.bits = cfg.qat_bits;
  qat.schedule = cfg.qat_schedule;

  QatState state;
  state.total_steps = total_steps;
  state.act_observers.assign(checkpoint.layers.size() + 1, RangeObserver{});
  if (resume_state) {
    state = *resume_state;
    state.total_steps = total_steps;
  }
  if (resume_adam) trainer.adam() = *resume_adam;

  const std::int64_t stop = max_steps < 0 ? total_steps : std::min<std::int64_t>(total_steps, max_steps);

  QatRunResult result;
  double loss_acc = 0.0;
  std::int64_t batches_in_epoch = 0;
  while (state.step < stop) {
    const auto epoch = static_cast<std::size_t>(state.step / steps_per_epoch);
    const auto batch_idx = static_cast<std::size_t>(state.step % steps_per_epoch);
    const auto order = epoch_order(cfg, n, mix_seed(0x9a7, epoch));
    const std::size_t begin = batch_idx * cfg.batch_utterances;
    const std::size_t end = std::min(n, begin + cfg.batch_utterances);
    double loss;
    try {
      loss = trainer.step(gather_batch(data.train_x, data.train_y, order, begin, end), qat, &state);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::diverged)
        raise(ErrorKind::diverged, "qat_train: diverged at step " + std::to_string(state.step) + ": " + e.what());
      throw;
    }
    loss_acc += loss;
    ++batches_in_epoch;
    if (state.step % steps_per_epoch == 0 || state.step == stop) {
      if (batches_in_epoch > 0) result.epoch_losses.push_back(loss_acc / static_cast<double>(batches_in_epoch));
      loss_acc = 0.0;
      batches_in_epoch = 0;
    }
  }

  result.model = trainer.take_model();
  result.model.metadata["trained"] = "qat";
  result.state = state;
  result.adam = trainer.adam();
  result.steps_run = state.step;
  if (state.step == total_steps)
    result.final_eval_accuracy = frame_accuracy_float(result.model, data.eval_x, data.eval_y);
  return result;
}

Matrix qat_forward_frozen(const TdnnModel& model, const Matrix& features, const std::vector<RangeStats>& act_ranges,
                          QuantBits bits) {
  model.validate();
  if (act_ranges.size() != model.layers.size() + 1)
    raise(ErrorKind::invalid_argument, "qat_forward_frozen: need one range per layer plus head");

  Matrix x = features;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    if (l.kind != LayerKind::dense) raise(ErrorKind::invalid_argument, "qat_forward_frozen: dense layers only");
    Matrix spliced = splice(x, l.context_offsets);
    const QuantParams ap = compute_qparams(act_ranges[i], bits, QuantMode::symmetric);
    spliced.data = fake_quantize(spliced.data, ap);
    Matrix w = l.weights;
    w.data = fake_quantize(w.data, weight_qparams(l.weights, bits));
    Matrix y = matmul_nt(spliced, w);
    add_bias_inplace(y, l.bias);
    relu_inplace(y);
    bn_affine_inplace(y, l.bn_scale, l.bn_shift);
    x = std::move(y);
  }
  const QuantParams hp = compute_qparams(act_ranges[model.layers.size()], bits, QuantMode::symmetric);
  x.data = fake_quantize(x.data, hp);
  Matrix w = model.output_weights;
  w.data = fake_quantize(w.data, weight_qparams(model.output_weights, bits));
  Matrix logits = matmul_nt(x, w);
  add_bias_inplace(logits, model.output_bias);
  log_softmax_rows_inplace(logits);
  return logits;
}

// ---------------------------------------------------------------------------
// Sidecar
// ---------------------------------------------------------------------------

namespace {
constexpr char kSidecarMagic[4] = {'Q', 'A', 'T', 'S'};
}

void save_qat_sidecar(const std::string& path, const QatState& state, const AdamState& adam,
                      const ToyTaskConfig& cfg) {
  BinWriter w(path);
  w.magic(kSidecarMagic);
  w.u32(1);
  w.u8(static_cast<std::uint8_t>(cfg.qat_bits));
  w.u8(static_cast<std::uint8_t>(cfg.qat_schedule.kind));
  w.f64(cfg.qat_schedule.activate_after_fraction);
  w.f64(cfg.qat_schedule.observer_momentum);
  w.i64(state.step);
  w.i64(state.total_steps);
  w.u32(static_cast<std::uint32_t>(state.act_observers.size()));
  for (const auto& ob : state.act_observers) {
    w.u8(ob.initialized ? 1 : 0);
    w.f64(ob.min);
    w.f64(ob.max);
  }
  w.i64(adam.t);
  w.u32(static_cast<std::uint32_t>(adam.m.size()));
  for (std::size_t i = 0; i < adam.m.size(); ++i) {
    w.u32(static_cast<std::uint32_t>(adam.m[i].size()));
    w.array(adam.m[i]);
    w.array(adam.v[i]);
  }
  w.finish();
}

QatSidecar load_qat_sidecar(const std::string& path) {
  BinReader r(path);
  r.section("sidecar header");
  r.expect_magic(kSidecarMagic, "qat sidecar header");
  const std::uint32_t version = r.u32();
  if (version != 1) raise(ErrorKind::format, path + ": unsupported sidecar version");
  QatSidecar sc;
  const std::uint8_t bits = r.u8();
  if (bits != 8 && bits != 16) raise(ErrorKind::format, path + ": bad bit width");
  sc.bits = static_cast<QuantBits>(bits);
  r.u8();   // schedule kind, informational
  r.f64();  // fraction
  r.f64();  // momentum
  sc.state.step = r.i64();
  sc.state.total_steps = r.i64();
  r.section("observers");
  const std::uint32_t n_obs = r.u32();
  if (n_obs > 4096) raise(ErrorKind::format, path + ": implausible observer count");
  for (std::uint32_t i = 0; i < n_obs; ++i) {
    RangeObserver ob;
    ob.initialized = r.u8() != 0;
    ob.min = r.f64();
    ob.max = r.f64();
    sc.state.act_observers.push_back(ob);
  }
  r.section("optimizer state");
  sc.adam.t = r.i64();
  const std::uint32_t n_tensors = r.u32();
  if (n_tensors > 65536) raise(ErrorKind::format, path + ": implausible tensor count");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const std::uint32_t len = r.u32();
    if (len > (1u << 28)) raise(ErrorKind::format, path + ": implausible tensor length");
    sc.adam.m.push_back(r.array<float>(len));
    sc.adam.v.push_back(r.array<float>(len));
  }
  return sc;
}

}  // namespace tdnnq
