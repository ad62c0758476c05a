// SPDX-License-Identifier: Apache-2.0
//
// tdnnq command line. A thin argument-parsing shim over the C API in
// libtdnnq; all real work happens behind tdnnq/tdnnq.h.

#include <CLI11.hpp>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "tdnnq/tdnnq.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

int exit_code_for(tdnnq_status status) {
  switch (status) {
    case TDNNQ_OK:
      return kExitOk;
    case TDNNQ_ERR_INVALID_ARGUMENT:
    case TDNNQ_ERR_CONFIG:
      return kExitUsage;
    default:
      return kExitRuntime;
  }
}

int finish(tdnnq_status status, char* report_json, const std::string& report_out, bool print_report) {
  if (status != TDNNQ_OK) {
    std::cerr << "error: " << tdnnq_last_error() << "\n";
    tdnnq_string_free(report_json);
    return exit_code_for(status);
  }
  if (report_json) {
    if (!report_out.empty()) {
      std::ofstream out(report_out);
      if (!out) {
        std::cerr << "error: cannot write report to " << report_out << "\n";
        tdnnq_string_free(report_json);
        return kExitRuntime;
      }
      out << report_json << "\n";
    }
    if (print_report) std::cout << report_json << "\n";
  }
  tdnnq_string_free(report_json);
  return kExitOk;
}

}  // namespace

namespace {
int dispatch(int argc, char** argv);
}

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

namespace {

int dispatch(int argc, char** argv) {
  CLI::App app{"Quantized TDNN inference and training toolkit"};
  app.set_version_flag("--version", tdnnq_version());
  app.require_subcommand(1);

  // train-toy
  std::string train_config, train_out_dir = ".";
  auto* train = app.add_subcommand("train-toy", "Train the synthetic toy acoustic task from a JSON config");
  train->add_option("config", train_config, "JSON training config")->required();
  train->add_option("--out-dir", train_out_dir, "Output directory for checkpoint, data files and report");

  // quantize
  std::string q_model, q_scheme = "full-custom", q_calib, q_out, q_report;
  int q_bits = 8;
  auto* quantize = app.add_subcommand("quantize", "Quantize a float checkpoint");
  quantize->add_option("model", q_model, "Float model file")->required();
  quantize->add_option("out", q_out, "Output model file")->required();
  quantize->add_option("--bits", q_bits, "Quantization bit width (8 or 16)")->check(CLI::IsMember({8, 16}));
  quantize->add_option("--scheme", q_scheme, "weights-only | full-custom | full-requant")
      ->check(CLI::IsMember({"weights-only", "full-custom", "full-requant"}));
  quantize->add_option("--calib", q_calib, "Calibration features (or QAT sidecar) for full-* schemes");

  // eval
  std::string e_model, e_feats, e_labels, e_report;
  auto* eval = app.add_subcommand("eval", "Frame accuracy and latency of a model on a labeled set");
  eval->add_option("model", e_model, "Model file")->required();
  eval->add_option("features", e_feats, "Feature file")->required();
  eval->add_option("labels", e_labels, "Label file")->required();
  eval->add_option("--report", e_report, "Also write the JSON report to this path");

  // compare
  std::vector<std::string> c_models;
  std::string c_feats, c_labels, c_report;
  bool c_json = false;
  auto* compare = app.add_subcommand("compare", "Side-by-side params/size/accuracy table");
  compare->add_option("models", c_models, "Baseline followed by candidate model files")->required()->expected(-2);
  compare->add_option("--features", c_feats, "Feature file")->required();
  compare->add_option("--labels", c_labels, "Label file")->required();
  compare->add_option("--report", c_report, "Also write the JSON report to this path");
  compare->add_flag("--json", c_json, "Print the JSON report instead of the text table");

  // qat
  std::string a_ckpt, a_config, a_schedule, a_out;
  double a_fraction = -1.0;
  std::int64_t a_max_steps = -1;
  bool a_resume = false;
  auto* qat = app.add_subcommand("qat", "Quantization-aware training from a float checkpoint");
  qat->add_option("checkpoint", a_ckpt, "Float checkpoint to start from")->required();
  qat->add_option("out", a_out, "Output checkpoint (sidecar written alongside)")->required();
  qat->add_option("--config", a_config, "JSON training config")->required();
  qat->add_option("--schedule", a_schedule, "full-epoch | final-iterations (overrides the config)")
      ->check(CLI::IsMember({"full-epoch", "final-iterations"}));
  qat->add_option("--activate-after", a_fraction, "final-iterations activation fraction in [0,1)");
  qat->add_option("--max-steps", a_max_steps, "Stop after N optimizer steps (resumable)");
  qat->add_flag("--resume", a_resume, "Continue an interrupted run from the out path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  char* report = nullptr;
  if (*train) {
    const tdnnq_status st = tdnnq_train_toy(train_config.c_str(), train_out_dir.c_str(), &report);
    return finish(st, report, "", true);
  }
  if (*quantize) {
    const tdnnq_status st = tdnnq_quantize(q_model.c_str(), q_bits, q_scheme.c_str(),
                                           q_calib.empty() ? nullptr : q_calib.c_str(), q_out.c_str(), &report);
    return finish(st, report, "", true);
  }
  if (*eval) {
    const tdnnq_status st = tdnnq_evaluate(e_model.c_str(), e_feats.c_str(), e_labels.c_str(), &report);
    return finish(st, report, e_report, true);
  }
  if (*compare) {
    std::vector<const char*> paths;
    for (const auto& p : c_models) paths.push_back(p.c_str());
    char* table = nullptr;
    const tdnnq_status st =
        tdnnq_compare(paths.data(), paths.size(), c_feats.c_str(), c_labels.c_str(), &report, &table);
    if (st == TDNNQ_OK && table && !c_json) std::cout << table;
    tdnnq_string_free(table);
    return finish(st, report, c_report, c_json);
  }
  if (*qat) {
    const tdnnq_status st = tdnnq_qat_train(a_ckpt.c_str(), a_config.c_str(),
                                            a_schedule.empty() ? nullptr : a_schedule.c_str(), a_fraction,
                                            a_out.c_str(), a_max_steps, a_resume ? 1 : 0, &report);
    return finish(st, report, "", true);
  }
  return kExitUsage;
}

}  // namespace
