// SPDX-License-Identifier: Apache-2.0

#include "pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "common/logging.hpp"
#include "lowrank/lowrank.hpp"
#include "ptq/ptq.hpp"
#include "tdnn/eval.hpp"
#include "tdnn/serialize.hpp"

namespace tdnnq {

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorKind::config, "cannot open config: " + path);
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    // nlohmann reports a byte offset; turn it into a line number.
    std::size_t line = 1;
    for (std::size_t i = 0; i < std::min(e.byte, text.size()); ++i)
      if (text[i] == '\n') ++line;
    raise(ErrorKind::config, path + ": line " + std::to_string(line) + ": " + e.what());
  }
}

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> known, const std::string& where) {
  for (const auto& item : obj.items()) {
    bool recognized = false;
    for (const char* k : known) recognized = recognized || item.key() == k;
    if (!recognized) raise(ErrorKind::config, "config: unknown key \"" + item.key() + "\" in " + where);
  }
}

template <typename T>
void read_field(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

QatSchedule parse_schedule(const json& q) {
  QatSchedule s;
  if (q.contains("schedule")) {
    const std::string kind = q.at("schedule").get<std::string>();
    if (kind == "full-epoch") {
      s.kind = ScheduleKind::full_epoch;
    } else if (kind == "final-iterations") {
      s.kind = ScheduleKind::final_iterations;
    } else {
      raise(ErrorKind::config, "config: qat.schedule must be \"full-epoch\" or \"final-iterations\"");
    }
  }
  read_field(q, "activate_after_fraction", s.activate_after_fraction);
  read_field(q, "observer_momentum", s.observer_momentum);
  return s;
}

QuantBits parse_bits(int bits, const std::string& where) {
  if (bits == 8) return QuantBits::b8;
  if (bits == 16) return QuantBits::b16;
  raise(ErrorKind::invalid_argument, where + ": bits must be 8 or 16");
}

struct Timing {
  double median_ms = 0.0;
  int runs = 0;
  int warmups = 0;
};

// Latency protocol: median over `runs` timed executions after `warmups`
// untimed ones.
template <typename F>
Timing measure(F&& fn, int runs = 30, int warmups = 5) {
  for (int i = 0; i < warmups; ++i) fn();
  std::vector<double> ms;
  ms.reserve(runs);
  for (int i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  Timing t;
  t.median_ms = ms[ms.size() / 2];
  t.runs = runs;
  t.warmups = warmups;
  return t;
}

bool file_has_magic(const std::string& path, const char tag[4]) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  char buf[4] = {0, 0, 0, 0};
  in.read(buf, 4);
  return in.gcount() == 4 && std::memcmp(buf, tag, 4) == 0;
}

void write_report_file(const json& report, const std::string& path) {
  validate_report(report);
  std::ofstream out(path);
  if (!out) raise(ErrorKind::io, "cannot write report: " + path);
  out << report.dump(2) << "\n";
}

}  // namespace

ToyTaskConfig parse_toy_config(const std::string& path) {
  const json j = read_json_file(path);
  if (!j.is_object()) raise(ErrorKind::config, path + ": config must be a JSON object");
  reject_unknown_keys(j, {"seed", "geometry", "task", "training", "qat"}, "top level");

  ToyTaskConfig cfg;
  read_field(j, "seed", cfg.seed);
  if (j.contains("geometry")) {
    const json& g = j.at("geometry");
    reject_unknown_keys(g, {"input_dim", "hidden_dim", "num_layers", "num_classes", "context"}, "geometry");
    read_field(g, "input_dim", cfg.input_dim);
    read_field(g, "hidden_dim", cfg.hidden_dim);
    read_field(g, "num_layers", cfg.num_layers);
    read_field(g, "num_classes", cfg.num_classes);
    read_field(g, "context", cfg.context);
  }
  if (j.contains("task")) {
    const json& t = j.at("task");
    reject_unknown_keys(t,
                        {"latent_dim", "num_anchors", "anchor_spread", "within_cluster_std", "dwell_frames",
                         "observation_noise", "teacher_layers", "teacher_hidden", "label_noise", "train_utterances",
                         "eval_utterances", "calib_utterances", "frames_per_utterance"},
                        "task");
    read_field(t, "latent_dim", cfg.latent_dim);
    read_field(t, "num_anchors", cfg.num_anchors);
    read_field(t, "anchor_spread", cfg.anchor_spread);
    read_field(t, "within_cluster_std", cfg.within_cluster_std);
    read_field(t, "dwell_frames", cfg.dwell_frames);
    read_field(t, "observation_noise", cfg.observation_noise);
    read_field(t, "teacher_layers", cfg.teacher_layers);
    read_field(t, "teacher_hidden", cfg.teacher_hidden);
    read_field(t, "label_noise", cfg.label_noise);
    read_field(t, "train_utterances", cfg.train_utterances);
    read_field(t, "eval_utterances", cfg.eval_utterances);
    read_field(t, "calib_utterances", cfg.calib_utterances);
    read_field(t, "frames_per_utterance", cfg.frames_per_utterance);
  }
  if (j.contains("training")) {
    const json& t = j.at("training");
    reject_unknown_keys(t, {"batch_utterances", "epochs", "learning_rate"}, "training");
    read_field(t, "batch_utterances", cfg.batch_utterances);
    read_field(t, "epochs", cfg.epochs);
    read_field(t, "learning_rate", cfg.learning_rate);
  }
  if (j.contains("qat")) {
    const json& q = j.at("qat");
    reject_unknown_keys(q, {"schedule", "activate_after_fraction", "observer_momentum", "bits", "epochs", "learning_rate"},
                        "qat");
    cfg.qat_schedule = parse_schedule(q);
    int bits = static_cast<int>(cfg.qat_bits);
    read_field(q, "bits", bits);
    cfg.qat_bits = parse_bits(bits, "config qat");
    read_field(q, "epochs", cfg.qat_epochs);
    read_field(q, "learning_rate", cfg.qat_learning_rate);
  }
  cfg.validate();
  return cfg;
}

json cmd_train_toy(const std::string& config_path, const std::string& out_dir) {
  const ToyTaskConfig cfg = parse_toy_config(config_path);
  std::filesystem::create_directories(out_dir);
  const auto out = [&](const std::string& name) { return (std::filesystem::path(out_dir) / name).string(); };

  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult result = train_toy(cfg);
  const auto t1 = std::chrono::steady_clock::now();

  const ToyData data = make_toy_data(cfg);
  save_model(ModelFile::plain(result.model), out("model.tdnq"));
  save_features(data.eval_x, out("eval.feats"));
  save_labels(data.eval_y, out("eval.labels"));
  save_features(data.calib_x, out("calib.feats"));
  save_labels(data.calib_y, out("calib.labels"));

  json report = report_envelope("train");
  report["model"] = model_summary(result.model, std::nullopt);
  report["accuracy"] = result.final_eval_accuracy;
  json training;
  training["epochs"] = cfg.epochs;
  training["steps"] = static_cast<std::int64_t>(cfg.epochs) *
                      static_cast<std::int64_t>((cfg.train_utterances + cfg.batch_utterances - 1) / cfg.batch_utterances);
  training["final_loss"] = result.epoch_losses.back();
  training["eval_accuracy_curve"] = result.eval_accuracy_curve;
  report["training"] = training;
  report["timing"] = timing_section(std::chrono::duration<double, std::milli>(t1 - t0).count(), 1, 0,
                                    cfg.train_utterances * cfg.frames_per_utterance * cfg.epochs);
  json artifacts;
  artifacts["model"] = out("model.tdnq");
  artifacts["eval_features"] = out("eval.feats");
  artifacts["eval_labels"] = out("eval.labels");
  artifacts["calibration_features"] = out("calib.feats");
  artifacts["report"] = out("report.json");
  report["artifacts"] = artifacts;

  write_report_file(report, out("report.json"));
  return report;
}

json cmd_quantize(const std::string& model_path, int bits, const std::string& scheme, const std::string& calib_path,
                  const std::string& out_path) {
  const QuantBits qbits = parse_bits(bits, "quantize");
  const ModelFile file = load_model(model_path);
  if (file.is_bundle()) raise(ErrorKind::invalid_argument, "quantize: input is already a quantized bundle");
  const TdnnModel& model = file.model;

  QuantConfig config;
  config.weight_bits = qbits;
  if (scheme == "weights-only") {
    config.act_bits.reset();
  } else if (scheme == "full-custom") {
    config.act_bits = qbits;
    config.scheme = QuantScheme::custom;
  } else if (scheme == "full-requant") {
    config.act_bits = qbits;
    config.scheme = QuantScheme::requant;
  } else {
    raise(ErrorKind::invalid_argument, "quantize: unknown scheme \"" + scheme +
                                           "\" (expected weights-only, full-custom or full-requant)");
  }

  CalibrationStats stats;
  const FeatureSet* calib_features = nullptr;
  FeatureSet features_storage;
  if (config.act_bits) {
    if (calib_path.empty())
      raise(ErrorKind::invalid_argument, "quantize: scheme " + scheme + " requires a calibration set (--calib)");
    if (file_has_magic(calib_path, "QATS")) {
      if (config.scheme == QuantScheme::requant)
        raise(ErrorKind::invalid_argument,
              "quantize: full-requant needs calibration features (observer sidecars carry no product ranges)");
      const QatSidecar sc = load_qat_sidecar(calib_path);
      stats.layer_inputs = observer_ranges(sc.state);
      stats.layer_products.assign(stats.layer_inputs.size(), RangeStats{0.0, 1.0});
      stats.frames_seen = 1;
    } else {
      features_storage = load_features(calib_path);
      calib_features = &features_storage;
      stats = calibrate(model, features_storage);
    }
  }

  QuantizationOutcome outcome = apply_quantization(model, config, config.act_bits ? &stats : nullptr);
  outcome.file.model.metadata["quantization"] = scheme + "-int" + std::to_string(bits);
  save_model(outcome.file, out_path);

  json report = report_envelope("quantize");
  report["model"] = model_summary(outcome.file.model, outcome.file.scheme);
  std::vector<std::size_t> sat;
  if (calib_features) sat = audit_saturations(model, outcome.file.act_params, *calib_features);
  report["per_layer"] = per_layer_records(outcome.records, calib_features ? &sat : nullptr);
  json artifacts;
  artifacts["model"] = out_path;
  report["artifacts"] = artifacts;
  const std::string report_path = out_path + ".report.json";
  report["artifacts"]["report"] = report_path;
  write_report_file(report, report_path);
  return report;
}

json cmd_eval(const std::string& model_path, const std::string& features_path, const std::string& labels_path) {
  const ModelFile file = load_model(model_path);
  const FeatureSet features = load_features(features_path);
  const LabelSet labels = load_labels(labels_path);

  double accuracy = 0.0;
  Timing timing;
  if (file.is_bundle()) {
    const QuantizedModel qm = file.as_quantized();
    accuracy = frame_accuracy_quantized(qm, features, labels);
    const QuantForwardPlans plans = build_forward_plans(qm);
    timing = measure([&] {
      for (const auto& utt : features.utterances) (void)forward_quantized_with_plans(qm, plans, utt);
    });
  } else {
    accuracy = frame_accuracy_float(file.model, features, labels);
    timing = measure([&] {
      for (const auto& utt : features.utterances) (void)forward_float(file.model, utt);
    });
  }

  json report = report_envelope("eval");
  report["model"] = model_summary(file.model, file.scheme);
  report["accuracy"] = accuracy;
  report["timing"] = timing_section(timing.median_ms, timing.runs, timing.warmups, features.total_frames());
  return report;
}

json cmd_compare(const std::vector<std::string>& model_paths, const std::string& features_path,
                 const std::string& labels_path) {
  if (model_paths.size() < 2) raise(ErrorKind::invalid_argument, "compare: need a baseline and at least one candidate");
  const FeatureSet features = load_features(features_path);
  const LabelSet labels = load_labels(labels_path);

  json rows = json::array();
  std::size_t baseline_bytes = 0;
  for (std::size_t i = 0; i < model_paths.size(); ++i) {
    const ModelFile file = load_model(model_paths[i]);
    if (file.model.input_dim() != features.dim())
      raise(ErrorKind::dimension, "compare: " + model_paths[i] + " input dim does not match the feature files");
    const double acc = file.is_bundle() ? frame_accuracy_quantized(file.as_quantized(), features, labels)
                                        : frame_accuracy_float(file.model, features, labels);
    const std::size_t bytes = file.model.weight_payload_bytes();
    if (i == 0) baseline_bytes = bytes;
    json row;
    row["model"] = std::filesystem::path(model_paths[i]).filename().string();
    const json summary = model_summary(file.model, file.scheme);
    row["quantization"] =
        summary.at("quantization").is_null() ? json(nullptr) : summary.at("quantization").at("scheme");
    row["params"] = file.model.param_count();
    row["weight_payload_bytes"] = bytes;
    row["size_ratio"] = static_cast<double>(bytes) / static_cast<double>(baseline_bytes);
    row["accuracy"] = acc;
    rows.push_back(row);
  }

  json report = report_envelope("compare");
  report["rows"] = rows;
  return report;
}

json cmd_qat(const std::string& checkpoint_path, const std::string& config_path, const std::string& schedule_override,
             double fraction_override, const std::string& out_path, std::int64_t max_steps, bool resume) {
  ToyTaskConfig cfg = parse_toy_config(config_path);
  if (!schedule_override.empty()) {
    if (schedule_override == "full-epoch") {
      cfg.qat_schedule.kind = ScheduleKind::full_epoch;
    } else if (schedule_override == "final-iterations") {
      cfg.qat_schedule.kind = ScheduleKind::final_iterations;
    } else {
      raise(ErrorKind::invalid_argument, "qat: unknown schedule \"" + schedule_override + "\"");
    }
  }
  if (fraction_override >= 0.0) cfg.qat_schedule.activate_after_fraction = fraction_override;
  cfg.validate();

  const std::string sidecar_path = out_path + ".qat";
  QatRunResult result;
  if (resume) {
    const ModelFile partial = load_model(out_path);
    if (partial.is_bundle()) raise(ErrorKind::invalid_argument, "qat --resume: out path must hold a float checkpoint");
    const QatSidecar sc = load_qat_sidecar(sidecar_path);
    result = qat_train(partial.model, cfg, max_steps, &sc.state, &sc.adam);
  } else {
    const ModelFile ckpt = load_model(checkpoint_path);
    if (ckpt.is_bundle()) raise(ErrorKind::invalid_argument, "qat: checkpoint must be a float model");
    result = qat_train(ckpt.model, cfg, max_steps);
  }

  save_model(ModelFile::plain(result.model), out_path);
  save_qat_sidecar(sidecar_path, result.state, result.adam, cfg);

  const bool completed = result.state.step == result.state.total_steps;
  json report = report_envelope("qat");
  report["model"] = model_summary(result.model, std::nullopt);
  report["accuracy"] = completed ? json(result.final_eval_accuracy) : json(nullptr);
  json q;
  q["schedule"] = cfg.qat_schedule.kind == ScheduleKind::full_epoch ? "full-epoch" : "final-iterations";
  q["activate_after_fraction"] = cfg.qat_schedule.activate_after_fraction;
  q["observer_momentum"] = cfg.qat_schedule.observer_momentum;
  q["bits"] = static_cast<int>(cfg.qat_bits);
  q["steps_run"] = result.state.step;
  q["total_steps"] = result.state.total_steps;
  q["completed"] = completed;
  json ranges = json::array();
  for (const auto& ob : result.state.act_observers) {
    json r;
    r["min"] = ob.min;
    r["max"] = ob.max;
    ranges.push_back(r);
  }
  q["observer_ranges"] = ranges;
  report["qat"] = q;
  json artifacts;
  artifacts["model"] = out_path;
  artifacts["sidecar"] = sidecar_path;
  artifacts["report"] = out_path + ".report.json";
  report["artifacts"] = artifacts;
  write_report_file(report, out_path + ".report.json");
  return report;
}

}  // namespace tdnnq
