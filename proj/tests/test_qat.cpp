// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "model_fixtures.hpp"
#include "ptq/ptq.hpp"
#include "qat/qat.hpp"
#include "tdnn/eval.hpp"
#include "test_util.hpp"

using namespace tdnnq;

namespace {

ToyTaskConfig micro_cfg() {
  ToyTaskConfig c;
  c.seed = 17;
  c.input_dim = 6;
  c.hidden_dim = 12;
  c.num_layers = 2;
  c.num_classes = 5;
  c.teacher_layers = 1;
  c.teacher_hidden = 8;
  c.label_noise = 0.3;
  c.train_utterances = 24;
  c.eval_utterances = 12;
  c.calib_utterances = 8;
  c.frames_per_utterance = 12;
  c.batch_utterances = 4;
  c.epochs = 8;
  c.learning_rate = 3e-3;
  c.qat_epochs = 1;
  c.qat_learning_rate = 5e-4;
  return c;
}

bool models_bit_identical(const TdnnModel& a, const TdnnModel& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (a.layers[i].weights.data != b.layers[i].weights.data) return false;
    if (a.layers[i].bias != b.layers[i].bias) return false;
    if (a.layers[i].bn_scale != b.layers[i].bn_scale) return false;
    if (a.layers[i].bn_shift != b.layers[i].bn_shift) return false;
  }
  return a.output_weights.data == b.output_weights.data && a.output_bias == b.output_bias;
}

}  // namespace

TEST_CASE("schedule: full_epoch always active; final_iterations gates on fraction") {
  QatSchedule full;
  full.kind = ScheduleKind::full_epoch;
  CHECK(full.active(0, 100));
  CHECK(full.active(99, 100));

  QatSchedule late;
  late.kind = ScheduleKind::final_iterations;
  late.activate_after_fraction = 0.9;
  CHECK_FALSE(late.active(0, 100));
  CHECK_FALSE(late.active(89, 100));
  CHECK(late.active(90, 100));

  QatSchedule zero = late;
  zero.activate_after_fraction = 0.0;
  for (std::int64_t s : {0, 1, 50, 99}) CHECK(zero.active(s, 100) == full.active(s, 100));
}

TEST_CASE("schedule validation") {
  QatSchedule s;
  s.kind = ScheduleKind::final_iterations;
  s.activate_after_fraction = 1.0;
  CHECK_THROWS_AS(s.validate(), Error);
  s.activate_after_fraction = 0.5;
  s.observer_momentum = 0.0;
  CHECK_THROWS_AS(s.validate(), Error);
  s.observer_momentum = 1.0;
  s.validate();
}

TEST_CASE("observer with momentum 1 is a pure running min/max (monotone)") {
  Rng rng(50);
  RangeObserver ob;
  double lo = 1e300, hi = -1e300;
  for (int i = 0; i < 200; ++i) {
    const double a = rng.next_uniform(-5.0, 5.0);
    const double b = a + rng.next_uniform(0.0, 3.0);
    ob.observe({a, b}, 1.0);
    lo = std::min(lo, a);
    hi = std::max(hi, b);
    CHECK(ob.min == lo);
    CHECK(ob.max == hi);
  }
}

TEST_CASE("observer expands immediately and shrinks slowly") {
  RangeObserver ob;
  ob.observe({-1.0, 1.0}, 0.99);
  // A wider batch must be covered at once.
  ob.observe({-4.0, 2.0}, 0.99);
  CHECK(ob.min == -4.0);
  CHECK(ob.max == 2.0);
  // A narrower batch only nudges the range.
  ob.observe({-0.5, 0.5}, 0.99);
  CHECK(ob.min == doctest::Approx(0.99 * -4.0 + 0.01 * -0.5));
  CHECK(ob.max == doctest::Approx(0.99 * 2.0 + 0.01 * 0.5));
  CHECK(ob.min < -3.9);
}

TEST_CASE("QAT never activated reproduces plain training bit for bit") {
  const ToyTaskConfig cfg = micro_cfg();
  const ToyData data = make_toy_data(cfg);
  const TdnnModel init = init_student(cfg);

  Trainer plain(init, cfg.learning_rate);
  Trainer gated(init, cfg.learning_rate);

  QatOptions no_qat;
  QatOptions qat;
  qat.enabled = true;
  qat.schedule.kind = ScheduleKind::final_iterations;
  qat.schedule.activate_after_fraction = 0.99;
  QatState state;
  state.total_steps = 1000;  // activation point far beyond the steps we run

  TrainBatch batch;
  for (std::size_t u = 0; u < 4; ++u) {
    batch.features.push_back(&data.train_x.utterances[u]);
    batch.labels.push_back(&data.train_y.utterances[u]);
  }
  for (int s = 0; s < 10; ++s) {
    const double l1 = plain.step(batch, no_qat, nullptr);
    const double l2 = gated.step(batch, qat, &state);
    CHECK(l1 == l2);
  }
  CHECK(models_bit_identical(plain.model(), gated.model()));
  // Observers collected ranges even though quantization stayed off.
  for (const auto& ob : state.act_observers) CHECK(ob.initialized);
}

TEST_CASE("frozen fake-quant forward with int16 and wide ranges tracks float closely") {
  Rng rng(51);
  const TdnnModel m = tdnnq::test::random_model(rng, 5, 14, 3, 9);
  Matrix x = tdnnq::test::gaussian_matrix(rng, 25, 5);

  FeatureSet probe;
  probe.utterances.push_back(x);
  const CalibrationStats stats = calibrate(m, probe);

  const Matrix yf = forward_float(m, x);
  const Matrix yq = qat_forward_frozen(m, x, stats.layer_inputs, QuantBits::b16);
  CHECK(tdnnq::test::max_abs_diff(yf, yq) < 1e-3);
}

TEST_CASE("effective weights are grid values: fake_quantize is a fixed point") {
  Rng rng(52);
  Matrix w = tdnnq::test::gaussian_matrix(rng, 10, 20, 0.3);
  const QuantParams p = compute_qparams(RangeStats::of(w.data), QuantBits::b8, QuantMode::symmetric);
  const auto w_eff = fake_quantize(w.data, p);
  const auto w_eff2 = fake_quantize(w_eff, p);
  CHECK(w_eff2 == w_eff);
}

TEST_CASE("STE mask: identity in range, zero when saturated") {
  QuantParams p = compute_qparams({-1.0, 1.0}, QuantBits::b8, QuantMode::symmetric);
  CHECK(ste_mask(0.0f, p) == 1.0f);
  CHECK(ste_mask(0.999f, p) == 1.0f);
  CHECK(ste_mask(1.5f, p) == 0.0f);
  CHECK(ste_mask(-1.5f, p) == 0.0f);
}

namespace {

// Double-precision clamp-surrogate loss, the independent oracle for the
// straight-through gradient check. Quantization ranges are held fixed
// (computed once at the analytic point); fake quantization is replaced by
// clamping onto the representable interval.
double surrogate_loss_oracle(const TdnnModel& model, const Matrix& feats, const std::vector<std::int32_t>& labels,
                             const std::vector<QuantParams>& act_params, const std::vector<QuantParams>& w_params,
                             const QuantParams& head_params) {
  const auto clampv = [](double x, const QuantParams& p) { return std::clamp(x, p.real_min(), p.real_max()); };
  const std::size_t n_layers = model.layers.size();

  std::vector<std::vector<double>> x(feats.rows, std::vector<double>(feats.cols));
  for (std::size_t t = 0; t < feats.rows; ++t)
    for (std::size_t d = 0; d < feats.cols; ++d) x[t][d] = feats.at(t, d);

  for (std::size_t i = 0; i < n_layers; ++i) {
    const auto& l = model.layers[i];
    const std::size_t in_dim = x[0].size();
    std::vector<std::vector<double>> y(x.size(), std::vector<double>(l.out_dim));
    for (std::size_t t = 0; t < x.size(); ++t) {
      std::vector<double> spliced(in_dim * l.context_offsets.size());
      for (std::size_t c = 0; c < l.context_offsets.size(); ++c) {
        const auto src = static_cast<std::size_t>(
            std::clamp<std::int64_t>(static_cast<std::int64_t>(t) + l.context_offsets[c], 0,
                                     static_cast<std::int64_t>(x.size()) - 1));
        for (std::size_t d = 0; d < in_dim; ++d) spliced[c * in_dim + d] = clampv(x[src][d], act_params[i]);
      }
      for (std::size_t k = 0; k < l.out_dim; ++k) {
        double z = l.bias[k];
        for (std::size_t j = 0; j < spliced.size(); ++j) z += spliced[j] * clampv(l.weights.at(k, j), w_params[i]);
        z = std::max(0.0, z);
        y[t][k] = z * l.bn_scale[k] + l.bn_shift[k];
      }
    }
    x = std::move(y);
  }

  double loss = 0.0;
  for (std::size_t t = 0; t < x.size(); ++t) {
    std::vector<double> logits(model.output_dim());
    for (std::size_t c = 0; c < model.output_dim(); ++c) {
      double z = model.output_bias[c];
      for (std::size_t j = 0; j < x[t].size(); ++j)
        z += clampv(x[t][j], act_params[n_layers]) * clampv(model.output_weights.at(c, j), head_params);
      logits[c] = z;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    loss += mx + std::log(sum) - logits[labels[t]];
  }
  return loss / static_cast<double>(x.size());
}

}  // namespace

TEST_CASE("STE gradients match finite differences of the clamp surrogate") {
  // 2-layer micro model; the surrogate replaces rounding with pure range
  // clamping, whose exact gradient is the straight-through rule. Elements
  // that define a tensor's min/max sit on the clamp boundary itself (a kink
  // of the surrogate), so the check skips values within 1% of the range
  // edge; every interior parameter must match.
  const ToyTaskConfig cfg = micro_cfg();
  const ToyData data = make_toy_data(cfg);
  Trainer trainer(init_student(cfg), cfg.learning_rate);

  QatOptions qat;
  qat.enabled = true;
  qat.bits = QuantBits::b8;
  qat.surrogate_no_round = true;
  qat.freeze_observers = true;
  QatState state;
  state.total_steps = 1;  // full_epoch schedule: quantization live at step 0
  state.act_observers.assign(cfg.num_layers + 1, RangeObserver{});

  TrainBatch batch;
  batch.features.push_back(&data.train_x.utterances[0]);
  batch.labels.push_back(&data.train_y.utterances[0]);

  // Seed observers from one unfrozen pass, then freeze. The ranges are
  // widened so no activation of this batch sits exactly on a clamp
  // boundary (the surrogate has kinks there and finite differences would
  // straddle them).
  {
    QatOptions warm = qat;
    warm.freeze_observers = false;
    (void)trainer.batch_loss(batch, warm, &state);
    for (auto& ob : state.act_observers) {
      const double span = ob.max - ob.min;
      ob.min -= 0.05 * span;
      ob.max += 0.05 * span;
    }
  }

  const auto analytic = trainer.compute_gradients(batch, qat, &state);
  auto params = trainer.parameter_tensors();
  REQUIRE(analytic.grads.size() == params.size());

  // Quantization ranges at the analytic point, replicated for the oracle.
  std::vector<QuantParams> act_params, w_params;
  for (std::size_t i = 0; i <= cfg.num_layers; ++i)
    act_params.push_back(compute_qparams(state.act_observers[i].range(), qat.bits, QuantMode::symmetric));
  TdnnModel snapshot = trainer.model();
  for (const auto& l : snapshot.layers)
    w_params.push_back(compute_qparams(RangeStats::of(l.weights.data), qat.bits, QuantMode::symmetric));
  const QuantParams head_params =
      compute_qparams(RangeStats::of(snapshot.output_weights.data), qat.bits, QuantMode::symmetric);

  Rng rng(53);
  const double h = 1e-5;
  std::size_t checked = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& tensor = *params[t];
    const RangeStats range = RangeStats::of(tensor);
    const double edge = std::max(std::abs(range.min), std::abs(range.max));
    for (int probe = 0; probe < 4; ++probe) {
      const std::size_t j = rng.next_index(tensor.size());
      if (edge > 0.0 && std::abs(tensor[j]) > 0.99 * edge) continue;
      const float saved = tensor[j];
      // Parameter tensors alias the trainer model; copy it into the
      // snapshot after each perturbation (micro scale, cheap).
      tensor[j] = static_cast<float>(saved + h);
      snapshot = trainer.model();
      const double lp = surrogate_loss_oracle(snapshot, *batch.features[0], *batch.labels[0], act_params, w_params,
                                              head_params);
      const double x_plus = tensor[j];
      tensor[j] = static_cast<float>(saved - h);
      snapshot = trainer.model();
      const double lm = surrogate_loss_oracle(snapshot, *batch.features[0], *batch.labels[0], act_params, w_params,
                                              head_params);
      const double x_minus = tensor[j];
      tensor[j] = saved;
      const double fd = (lp - lm) / (x_plus - x_minus);
      CHECK(std::abs(fd - analytic.grads[t][j]) < 1e-4);
      ++checked;
    }
  }
  CHECK(checked > 20);
}

TEST_CASE("train_toy learns the micro task and is seed deterministic") {
  const ToyTaskConfig cfg = micro_cfg();
  const TrainResult r1 = train_toy(cfg);
  CHECK(r1.epoch_losses.front() > r1.epoch_losses.back());
  CHECK(r1.final_eval_accuracy > 2.0 / static_cast<double>(cfg.num_classes));
  CHECK(r1.eval_accuracy_curve.size() == cfg.epochs);

  const TrainResult r2 = train_toy(cfg);
  CHECK(models_bit_identical(r1.model, r2.model));
  CHECK(r1.final_eval_accuracy == r2.final_eval_accuracy);
}

TEST_CASE("divergence is detected and reported") {
  ToyTaskConfig cfg = micro_cfg();
  cfg.learning_rate = 1e30;  // one step overflows float32 activations
  cfg.epochs = 3;
  try {
    (void)train_toy(cfg);
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::diverged);
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
  }
}

TEST_CASE("final_iterations fraction 0 equals full_epoch") {
  const ToyTaskConfig base = micro_cfg();
  const TrainResult trained = train_toy(base);

  ToyTaskConfig a = base;
  a.qat_schedule.kind = ScheduleKind::full_epoch;
  ToyTaskConfig b = base;
  b.qat_schedule.kind = ScheduleKind::final_iterations;
  b.qat_schedule.activate_after_fraction = 0.0;

  const QatRunResult ra = qat_train(trained.model, a);
  const QatRunResult rb = qat_train(trained.model, b);
  CHECK(models_bit_identical(ra.model, rb.model));
}

TEST_CASE("QAT run from a checkpoint trains and freezes usable observer ranges") {
  const ToyTaskConfig cfg = micro_cfg();
  const TrainResult trained = train_toy(cfg);
  const QatRunResult qr = qat_train(trained.model, cfg);
  CHECK(qr.steps_run == qr.state.total_steps);
  const auto ranges = observer_ranges(qr.state);
  CHECK(ranges.size() == cfg.num_layers + 1);
  for (const auto& r : ranges) CHECK(r.min < r.max);

  // Simulated quantization and the real integer path agree on argmax.
  const ToyData data = make_toy_data(cfg);
  CalibrationStats stats;
  stats.layer_inputs = ranges;
  stats.layer_products = calibrate(qr.model, data.calib_x).layer_products;
  stats.frames_seen = 1;
  const FullQuantResult fq = quantize_full(qr.model, stats, QuantBits::b8, QuantScheme::custom);
  const QuantForwardPlans plans = build_forward_plans(fq.qmodel);

  std::size_t agree = 0, total = 0;
  for (const auto& utt : data.eval_x.utterances) {
    const Matrix sim = qat_forward_frozen(qr.model, utt, ranges, QuantBits::b8);
    const Matrix real = forward_quantized_with_plans(fq.qmodel, plans, utt);
    for (std::size_t t = 0; t < sim.rows; ++t) {
      agree += argmax_row(sim, t) == argmax_row(real, t);
      ++total;
    }
  }
  CHECK(static_cast<double>(agree) / static_cast<double>(total) >= 0.99);
}

TEST_CASE("interrupted QAT resumes to a bit-identical result") {
  const ToyTaskConfig cfg = micro_cfg();
  const TrainResult trained = train_toy(cfg);

  const QatRunResult full = qat_train(trained.model, cfg);
  REQUIRE(full.steps_run > 2);

  const std::int64_t half = full.steps_run / 2;
  const QatRunResult part1 = qat_train(trained.model, cfg, half);
  CHECK(part1.steps_run == half);
  const QatRunResult part2 = qat_train(part1.model, cfg, -1, &part1.state, &part1.adam);
  CHECK(part2.steps_run == full.steps_run);
  CHECK(models_bit_identical(part2.model, full.model));
  for (std::size_t i = 0; i < full.state.act_observers.size(); ++i) {
    CHECK(part2.state.act_observers[i].min == full.state.act_observers[i].min);
    CHECK(part2.state.act_observers[i].max == full.state.act_observers[i].max);
  }
}

TEST_CASE("qat sidecar round trips state and optimizer moments exactly") {
  const ToyTaskConfig cfg = micro_cfg();
  const TrainResult trained = train_toy(cfg);
  const QatRunResult qr = qat_train(trained.model, cfg, 3);

  tdnnq::test::TempDir dir("qat_sidecar");
  const std::string path = dir.path("s.qat");
  save_qat_sidecar(path, qr.state, qr.adam, cfg);
  const QatSidecar sc = load_qat_sidecar(path);
  CHECK(sc.state.step == qr.state.step);
  CHECK(sc.state.total_steps == qr.state.total_steps);
  CHECK(sc.bits == cfg.qat_bits);
  REQUIRE(sc.adam.m.size() == qr.adam.m.size());
  for (std::size_t i = 0; i < sc.adam.m.size(); ++i) {
    CHECK(sc.adam.m[i] == qr.adam.m[i]);
    CHECK(sc.adam.v[i] == qr.adam.v[i]);
  }
  for (std::size_t i = 0; i < sc.state.act_observers.size(); ++i) {
    CHECK(sc.state.act_observers[i].min == qr.state.act_observers[i].min);
    CHECK(sc.state.act_observers[i].max == qr.state.act_observers[i].max);
  }

  // Resuming from the sidecar matches in-memory resume.
  const QatRunResult from_disk = qat_train(qr.model, cfg, -1, &sc.state, &sc.adam);
  const QatRunResult from_mem = qat_train(qr.model, cfg, -1, &qr.state, &qr.adam);
  CHECK(models_bit_identical(from_disk.model, from_mem.model));
}
