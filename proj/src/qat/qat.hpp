// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "common/rng.hpp"
#include "tdnn/model.hpp"
#include "tdnn/serialize.hpp"

namespace tdnnq {

enum class ScheduleKind : std::uint8_t { full_epoch = 0, final_iterations = 1 };

// When fake quantization is live during a QAT run. full_epoch covers the
// whole run; final_iterations switches on after a fraction of the steps so
// only the tail of the last epoch trains against quantization error.
// Fraction 0 makes the two identical.
struct QatSchedule {
  ScheduleKind kind = ScheduleKind::full_epoch;
  double activate_after_fraction = 0.9;
  double observer_momentum = 0.99;

  void validate() const;
  bool active(std::int64_t step, std::int64_t total_steps) const;
};

// Running activation range. A new batch statistic is folded in by
// exponential moving average but the range always expands immediately to
// cover the batch; momentum 1 degenerates to a pure running min/max and is
// therefore monotone.
struct RangeObserver {
  bool initialized = false;
  double min = 0.0;
  double max = 0.0;

  void observe(const RangeStats& batch, double momentum);
  RangeStats range() const;
};

struct QatState {
  std::vector<RangeObserver> act_observers;  // one per layer plus head
  std::int64_t step = 0;
  std::int64_t total_steps = 0;
};

struct QatOptions {
  bool enabled = false;
  QuantBits bits = QuantBits::b8;
  QatSchedule schedule;
  // Test hook: replace fake quantization with its clamp-only surrogate
  // (no rounding), the function whose exact gradient the straight-through
  // estimator computes.
  bool surrogate_no_round = false;
  // Keep observer ranges fixed during the forward (gradient checks need a
  // loss that is a pure function of the parameters).
  bool freeze_observers = false;
};

// Straight-through estimator mask: 1 where the pre-quantization value lies
// inside the representable range, 0 where it saturated.
inline float ste_mask(float pre_quant_value, const QuantParams& p) {
  return in_quant_range(pre_quant_value, p) ? 1.0f : 0.0f;
}

// ---------------------------------------------------------------------------
// Trainer: single-threaded SGD/Adam with hand-rolled backprop through the
// TDNN stack, optionally with fake-quantized weights and activations.
// ---------------------------------------------------------------------------

struct AdamState {
  std::int64_t t = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
};

struct TrainBatch {
  std::vector<const Matrix*> features;
  std::vector<const std::vector<std::int32_t>*> labels;
};

class Trainer {
public:
  Trainer(TdnnModel model, double learning_rate);

  // One optimizer step over a batch of utterances. Returns the mean
  // cross-entropy over the batch frames. When `qat.enabled`, observers in
  // `state` are updated every forward and fake quantization is applied
  // whenever the schedule is active at the current step.
  double step(const TrainBatch& batch, const QatOptions& qat, QatState* state);

  // Mean loss and per-tensor gradients without stepping; tensors follow
  // parameter_tensors() order.
  struct GradientResult {
    std::vector<std::vector<float>> grads;
    double loss = 0.0;
  };
  GradientResult compute_gradients(const TrainBatch& batch, const QatOptions& qat, QatState* state);
  double batch_loss(const TrainBatch& batch, const QatOptions& qat, QatState* state);

  // Mutable views of every trainable tensor in a fixed order: per layer the
  // weight matrix (or both factors), bias, bn scale, bn shift; then the
  // output weights and bias.
  std::vector<std::vector<float>*> parameter_tensors();

  const TdnnModel& model() const { return model_; }
  TdnnModel take_model() { return std::move(model_); }
  AdamState& adam() { return adam_; }
  double learning_rate() const { return learning_rate_; }

private:
  struct Grads;
  void forward_backward(const Matrix& feats, const std::vector<std::int32_t>& labels, const QatOptions& qat,
                        QatState* state, bool quant_live, double inv_total_frames, Grads& grads, double& loss_sum);

  TdnnModel model_;
  double learning_rate_;
  AdamState adam_;
};

// ---------------------------------------------------------------------------
// Desk-scale synthetic frame-classification task: features are smoothed
// Gaussian sequences, labels come from a fixed random teacher TDNN with
// logit noise. Everything is a pure function of the config seed.
// ---------------------------------------------------------------------------

struct ToyTaskConfig {
  std::uint64_t seed = 50;
  std::size_t input_dim = 16;
  std::size_t hidden_dim = 64;
  std::size_t num_layers = 7;
  std::size_t num_classes = 41;
  std::vector<std::int32_t> context{-1, 0, 1};
  // Features follow a low-dimensional latent trajectory that dwells near
  // randomly placed anchors (phone-like segments) and is lifted into
  // input_dim by a fixed random map plus observation noise. Dwell segments
  // give most frames a wide margin to the teacher's decision boundaries,
  // which keeps the task learnable at desk scale.
  std::size_t latent_dim = 4;
  std::size_t num_anchors = 32;
  double anchor_spread = 2.0;
  double within_cluster_std = 0.12;
  std::size_t dwell_frames = 8;
  double observation_noise = 0.1;
  std::size_t teacher_layers = 1;
  std::size_t teacher_hidden = 8;
  double label_noise = 0.02;
  std::size_t train_utterances = 500;
  std::size_t eval_utterances = 100;
  std::size_t calib_utterances = 100;
  std::size_t frames_per_utterance = 30;
  std::size_t batch_utterances = 8;
  std::size_t epochs = 24;
  double learning_rate = 1.5e-3;

  // QAT run settings (used by qat_train).
  QatSchedule qat_schedule;
  QuantBits qat_bits = QuantBits::b8;
  std::size_t qat_epochs = 1;
  double qat_learning_rate = 2e-4;

  void validate() const;
};

struct ToyData {
  FeatureSet train_x, eval_x, calib_x;
  LabelSet train_y, eval_y, calib_y;
};

ToyData make_toy_data(const ToyTaskConfig& cfg);
TdnnModel make_teacher(const ToyTaskConfig& cfg);
TdnnModel init_student(const ToyTaskConfig& cfg);

struct TrainResult {
  TdnnModel model;
  std::vector<double> epoch_losses;
  std::vector<double> eval_accuracy_curve;
  double final_eval_accuracy = 0.0;
};

// Float training of the toy task from random init. Raises `diverged` with a
// diagnostic if the loss goes non-finite.
TrainResult train_toy(const ToyTaskConfig& cfg);

struct QatRunResult {
  TdnnModel model;
  QatState state;
  AdamState adam;
  std::vector<double> epoch_losses;
  double final_eval_accuracy = 0.0;
  std::int64_t steps_run = 0;
};

// QAT run from a float checkpoint, per the config's qat_* settings.
// `max_steps` < total stops early with resumable state; passing the
// previous result's state/adam (and its step counter) resumes exactly.
QatRunResult qat_train(const TdnnModel& checkpoint, const ToyTaskConfig& cfg, std::int64_t max_steps = -1,
                       const QatState* resume_state = nullptr, const AdamState* resume_adam = nullptr);

// Single fake-quant forward with frozen observer ranges (no updates), the
// simulated-quantization counterpart of forward_quantized.
Matrix qat_forward_frozen(const TdnnModel& model, const Matrix& features, const std::vector<RangeStats>& act_ranges,
                          QuantBits bits);

// QAT-state sidecar (observers + Adam moments + step counters), binary.
void save_qat_sidecar(const std::string& path, const QatState& state, const AdamState& adam, const ToyTaskConfig& cfg);
struct QatSidecar {
  QatState state;
  AdamState adam;
  QuantBits bits = QuantBits::b8;
};
QatSidecar load_qat_sidecar(const std::string& path);

// Calibration-style ranges from QAT observers, for handing to quantize_full.
std::vector<RangeStats> observer_ranges(const QatState& state);

}  // namespace tdnnq
