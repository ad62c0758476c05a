// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "model_fixtures.hpp"
#include "pipeline.hpp"
#include "ptq/ptq.hpp"
#include "report/report.hpp"
#include "test_util.hpp"

using namespace tdnnq;
using tdnnq::test::TempDir;

namespace {

std::string repo_path(const std::string& rel) { return std::string(TDNNQ_SOURCE_DIR) + "/" + rel; }

}  // namespace

TEST_CASE("embedded schema matches the shipped schema file") {
  std::ifstream in(repo_path("schemas/report.schema.json"));
  REQUIRE(in.good());
  const json file_schema = json::parse(in);
  CHECK(file_schema == report_schema());
}

TEST_CASE("schema validator accepts the envelope and rejects corruption") {
  json report = report_envelope("eval");
  report["accuracy"] = 0.5;
  validate_report(report);

  json bad_kind = report;
  bad_kind["kind"] = "nonsense";
  CHECK_THROWS_AS(validate_report(bad_kind), Error);

  json missing = report;
  missing.erase("timing");
  CHECK_THROWS_AS(validate_report(missing), Error);

  json wrong_type = report;
  wrong_type["accuracy"] = "high";
  CHECK_THROWS_AS(validate_report(wrong_type), Error);
}

TEST_CASE("model summaries fill every field, null where unused") {
  Rng rng(80);
  const TdnnModel m = tdnnq::test::random_model(rng, 4, 8, 2, 5);
  const json j = model_summary(m, std::nullopt);
  CHECK(j.at("quantization").is_null());
  CHECK(j.at("params").get<std::size_t>() == m.param_count());
  CHECK(j.at("size_ratio_vs_float32").get<double>() == 1.0);

  const TdnnModel q = quantize_weights_only(m, QuantBits::b8);
  const json jq = model_summary(q, std::nullopt);
  CHECK(jq.at("quantization").at("scheme") == "weights-only");
  CHECK(jq.at("quantization").at("weight_bits") == 8);
  CHECK(jq.at("size_ratio_vs_float32").get<double>() == doctest::Approx(0.25));
}

TEST_CASE("quantize reports validate and carry per-layer stats") {
  Rng rng(81);
  const TdnnModel m = tdnnq::test::random_model(rng, 4, 8, 2, 5);
  TempDir dir("report_quant");
  const std::string model_path = dir.path("m.tdnq");
  save_model(ModelFile::plain(m), model_path);

  FeatureSet calib;
  calib.utterances.push_back(tdnnq::test::gaussian_matrix(rng, 12, 4));
  const std::string calib_path = dir.path("c.feats");
  save_features(calib, calib_path);

  const json report = cmd_quantize(model_path, 8, "full-custom", calib_path, dir.path("q.tdnq"));
  validate_report(report);
  REQUIRE(report.at("per_layer").is_array());
  CHECK(report.at("per_layer").size() == 3);
  for (const auto& layer : report.at("per_layer")) {
    CHECK(layer.at("weight_scale").get<double>() > 0.0);
    CHECK(layer.at("activation_scale").get<double>() > 0.0);
    CHECK(layer.at("saturation_count").get<std::size_t>() == 0);
  }
  CHECK(report.at("model").at("quantization").at("scheme") == "full-custom");
  CHECK(std::filesystem::exists(dir.path("q.tdnq")));
  CHECK(std::filesystem::exists(dir.path("q.tdnq.report.json")));
}

TEST_CASE("compare reports render as a table and round trip through JSON") {
  Rng rng(82);
  const TdnnModel m = tdnnq::test::random_model(rng, 4, 8, 2, 5);
  TempDir dir("report_cmp");
  save_model(ModelFile::plain(m), dir.path("float.tdnq"));
  save_model(ModelFile::plain(quantize_weights_only(m, QuantBits::b8)), dir.path("w8.tdnq"));

  FeatureSet fs;
  fs.utterances.push_back(tdnnq::test::gaussian_matrix(rng, 10, 4));
  save_features(fs, dir.path("e.feats"));
  LabelSet ls;
  ls.utterances.push_back(std::vector<std::int32_t>(10, 1));
  save_labels(ls, dir.path("e.labels"));

  const json report = cmd_compare({dir.path("float.tdnq"), dir.path("w8.tdnq")}, dir.path("e.feats"), dir.path("e.labels"));
  validate_report(report);
  REQUIRE(report.at("rows").size() == 2);
  CHECK(report.at("rows")[0].at("size_ratio").get<double>() == 1.0);
  CHECK(report.at("rows")[1].at("size_ratio").get<double>() == doctest::Approx(0.25));

  const std::string table = render_compare_table(report);
  CHECK(table.find("float.tdnq") != std::string::npos);
  CHECK(table.find("w8.tdnq") != std::string::npos);
  CHECK(table.find("Accuracy") != std::string::npos);

  // Round trip through the schema: parse the dump and validate again.
  const json reparsed = json::parse(report.dump());
  validate_report(reparsed);
  CHECK(reparsed == report);
}

TEST_CASE("config parsing reports line numbers and rejects unknown keys") {
  TempDir dir("report_cfg");
  const std::string bad = dir.path("bad.json");
  {
    std::ofstream out(bad);
    out << "{\n  \"seed\": 1,\n  \"oops\n}\n";
  }
  try {
    (void)parse_toy_config(bad);
    FAIL("expected config error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
    // The unterminated string is consumed through the newline, so the
    // diagnostic points at line 4.
    CHECK(std::string(e.what()).find("line 4") != std::string::npos);
    CHECK(std::string(e.what()).find(bad) != std::string::npos);
  }

  const std::string unknown = dir.path("unknown.json");
  {
    std::ofstream out(unknown);
    out << "{\"seed\": 1, \"geometri\": {}}";
  }
  try {
    (void)parse_toy_config(unknown);
    FAIL("expected config error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("geometri") != std::string::npos);
  }

  CHECK_THROWS_AS(parse_toy_config(dir.path("missing.json")), Error);
}

TEST_CASE("reference configs in the repo parse cleanly") {
  const ToyTaskConfig ref = parse_toy_config(repo_path("configs/toy_reference.json"));
  CHECK(ref.seed == 50);
  CHECK(ref.num_layers == 7);
  CHECK(ref.hidden_dim == 64);
  CHECK(ref.num_classes == 41);
  const ToyTaskConfig small = parse_toy_config(repo_path("configs/toy_small.json"));
  CHECK(small.num_layers == 3);
}
