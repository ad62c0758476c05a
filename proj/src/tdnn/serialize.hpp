// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tdnn/model.hpp"

namespace tdnnq {

// On-disk model container (byte layout in docs/model_format.md). A plain
// float model and a quantized bundle share the format; the bundle adds
// per-layer activation (and output) quantization parameter sections.
struct ModelFile {
  TdnnModel model;
  std::optional<QuantScheme> scheme;       // nullopt = float / weight-only file
  std::vector<QuantParams> act_params;     // present when scheme is set
  std::vector<QuantParams> out_params;     // present for the requant scheme

  bool is_bundle() const { return scheme.has_value(); }
  QuantizedModel as_quantized() const;
  static ModelFile plain(TdnnModel m);
  static ModelFile bundle(const QuantizedModel& qm);
};

void save_model(const ModelFile& file, const std::string& path);
ModelFile load_model(const std::string& path);

constexpr std::uint32_t kModelFormatVersion = 1;

// Utterance-framed feature and label sets. Binary by default; a file
// without the magic tag is parsed as text (one frame per row / one label
// per line) and treated as a single utterance.
struct FeatureSet {
  std::vector<Matrix> utterances;
  std::size_t dim() const { return utterances.empty() ? 0 : utterances.front().cols; }
  std::size_t total_frames() const;
};

struct LabelSet {
  std::vector<std::vector<std::int32_t>> utterances;
  std::size_t total_frames() const;
};

void save_features(const FeatureSet& fs, const std::string& path);
FeatureSet load_features(const std::string& path);

void save_labels(const LabelSet& ls, const std::string& path);
LabelSet load_labels(const std::string& path);

}  // namespace tdnnq
