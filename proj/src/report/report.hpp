// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ptq/ptq.hpp"
#include "tdnn/model.hpp"

namespace tdnnq {

using json = nlohmann::json;

// A minimal JSON-Schema checker covering the subset the shipped schema
// uses: type (string or list), required, properties, items, enum. Raises a
// format error naming the offending path.
void validate_against_schema(const json& value, const json& schema, const std::string& path = "$");

// The schema shipped at schemas/report.schema.json, embedded for runtime
// validation. Every report the library emits must pass it.
const json& report_schema();
void validate_report(const json& report);

// Shared report fragments.
json model_summary(const TdnnModel& model, const std::optional<QuantScheme>& scheme);
json per_layer_records(const std::vector<LayerQuantRecord>& records,
                       const std::vector<std::size_t>* saturations);
json timing_section(double median_ms, int runs, int warmups, std::size_t frames);

// Report envelope with every top-level field present (null when unused).
json report_envelope(const std::string& kind);

std::string render_compare_table(const json& compare_report);

}  // namespace tdnnq
