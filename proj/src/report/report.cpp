// SPDX-License-Identifier: Apache-2.0

#include "report/report.hpp"

#include <iomanip>
#include <sstream>

#include "report_schema_data.hpp"

namespace tdnnq {

namespace {

bool type_matches(const json& value, const std::string& type) {
  if (type == "object") return value.is_object();
  if (type == "array") return value.is_array();
  if (type == "string") return value.is_string();
  if (type == "integer") return value.is_number_integer();
  if (type == "number") return value.is_number();
  if (type == "boolean") return value.is_boolean();
  if (type == "null") return value.is_null();
  return false;
}

}  // namespace

void validate_against_schema(const json& value, const json& schema, const std::string& path) {
  if (schema.contains("type")) {
    const json& t = schema["type"];
    bool ok = false;
    if (t.is_string()) {
      ok = type_matches(value, t.get<std::string>());
    } else {
      for (const auto& alt : t) ok = ok || type_matches(value, alt.get<std::string>());
    }
    if (!ok) raise(ErrorKind::format, "report schema: " + path + " has wrong type");
  }
  if (schema.contains("enum")) {
    bool ok = false;
    for (const auto& alt : schema["enum"]) ok = ok || alt == value;
    if (!ok) raise(ErrorKind::format, "report schema: " + path + " not in enum");
  }
  if (value.is_object()) {
    if (schema.contains("required"))
      for (const auto& key : schema["required"])
        if (!value.contains(key.get<std::string>()))
          raise(ErrorKind::format, "report schema: " + path + " missing required key " + key.get<std::string>());
    if (schema.contains("properties"))
      for (const auto& [key, sub] : schema["properties"].items())
        if (value.contains(key)) validate_against_schema(value.at(key), sub, path + "." + key);
  }
  if (value.is_array() && schema.contains("items")) {
    std::size_t i = 0;
    for (const auto& item : value) validate_against_schema(item, schema["items"], path + "[" + std::to_string(i++) + "]");
  }
}

const json& report_schema() {
  static const json schema = json::parse(detail::kReportSchemaJson);
  return schema;
}

void validate_report(const json& report) { validate_against_schema(report, report_schema()); }

json model_summary(const TdnnModel& model, const std::optional<QuantScheme>& scheme) {
  json j;
  const auto it = model.metadata.find("name");
  j["name"] = it != model.metadata.end() ? it->second : "unnamed";
  j["head_kind"] = head_kind_name(model.head_kind);
  j["params"] = model.param_count();
  j["weight_payload_bytes"] = model.weight_payload_bytes();
  j["size_ratio_vs_float32"] =
      static_cast<double>(model.weight_payload_bytes()) / static_cast<double>(model.float32_weight_payload_bytes());

  const bool weights_quantized = model.stored_head_q.has_value();
  if (!weights_quantized && !scheme) {
    j["quantization"] = nullptr;
  } else {
    json q;
    const QuantBits bits = model.stored_head_q ? model.stored_head_q->bits : QuantBits::b8;
    q["weight_bits"] = static_cast<int>(bits);
    q["activation_bits"] = scheme ? json(static_cast<int>(bits)) : json(nullptr);
    q["scheme"] = scheme ? quant_scheme_name(*scheme) : "weights-only";
    j["quantization"] = q;
  }
  return j;
}

json per_layer_records(const std::vector<LayerQuantRecord>& records, const std::vector<std::size_t>* saturations) {
  json arr = json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    json j;
    j["name"] = r.name;
    j["weight_scale"] = r.weight_params.scale;
    j["weight_zero_point"] = r.weight_params.zero_point;
    j["activation_scale"] = r.act_params ? json(r.act_params->scale) : json(nullptr);
    j["activation_zero_point"] = r.act_params ? json(r.act_params->zero_point) : json(nullptr);
    j["output_scale"] = r.out_params ? json(r.out_params->scale) : json(nullptr);
    j["output_zero_point"] = r.out_params ? json(r.out_params->zero_point) : json(nullptr);
    j["observed_min"] = r.observed_input.min;
    j["observed_max"] = r.observed_input.max;
    j["saturation_count"] = saturations ? json((*saturations)[i]) : json(nullptr);
    arr.push_back(j);
  }
  return arr;
}

json timing_section(double median_ms, int runs, int warmups, std::size_t frames) {
  json j;
  j["median_ms"] = median_ms;
  j["runs"] = runs;
  j["warmups"] = warmups;
  j["microseconds_per_frame"] = frames ? json(median_ms * 1000.0 / static_cast<double>(frames)) : json(nullptr);
  return j;
}

json report_envelope(const std::string& kind) {
  json j;
  j["schema_version"] = 1;
  j["kind"] = kind;
  j["model"] = nullptr;
  j["accuracy"] = nullptr;
  j["per_layer"] = nullptr;
  j["timing"] = nullptr;
  return j;
}

std::string render_compare_table(const json& compare_report) {
  const auto& rows = compare_report.at("rows");
  std::size_t name_w = 5;
  for (const auto& r : rows) name_w = std::max(name_w, r.at("model").get<std::string>().size());

  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(name_w) + 2) << "Model" << std::setw(16) << "Quantization"
      << std::right << std::setw(10) << "Params" << std::setw(14) << "Size(bytes)" << std::setw(8) << "Ratio"
      << std::setw(10) << "Accuracy" << "\n";
  out << std::string(name_w + 2 + 16 + 10 + 14 + 8 + 10, '-') << "\n";
  for (const auto& r : rows) {
    const auto& q = r.at("quantization");
    out << std::left << std::setw(static_cast<int>(name_w) + 2) << r.at("model").get<std::string>() << std::setw(16)
        << (q.is_null() ? "none" : q.get<std::string>()) << std::right << std::setw(10)
        << r.at("params").get<std::size_t>() << std::setw(14) << r.at("weight_payload_bytes").get<std::size_t>()
        << std::setw(8) << std::fixed << std::setprecision(2) << r.at("size_ratio").get<double>() << std::setw(10)
        << std::setprecision(4) << r.at("accuracy").get<double>() << "\n";
  }
  return out.str();
}

}  // namespace tdnnq
