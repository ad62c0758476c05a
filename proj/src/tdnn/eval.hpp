// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "tdnn/model.hpp"
#include "tdnn/serialize.hpp"

namespace tdnnq {

inline std::int32_t argmax_row(const Matrix& m, std::size_t r) {
  const float* row = m.row(r);
  std::int32_t best = 0;
  for (std::size_t c = 1; c < m.cols; ++c)
    if (row[c] > row[best]) best = static_cast<std::int32_t>(c);
  return best;
}

// Frame-classification accuracy of the float path.
inline double frame_accuracy_float(const TdnnModel& model, const FeatureSet& x, const LabelSet& y) {
  if (x.utterances.size() != y.utterances.size())
    raise(ErrorKind::invalid_input, "evaluate: feature/label utterance counts differ");
  std::size_t correct = 0, total = 0;
  for (std::size_t u = 0; u < x.utterances.size(); ++u) {
    if (x.utterances[u].rows != y.utterances[u].size())
      raise(ErrorKind::invalid_input, "evaluate: feature/label frame counts differ in utterance " + std::to_string(u));
    const Matrix out = forward_float(model, x.utterances[u]);
    for (std::size_t t = 0; t < out.rows; ++t) {
      correct += argmax_row(out, t) == y.utterances[u][t];
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

inline double frame_accuracy_quantized(const QuantizedModel& qm, const FeatureSet& x, const LabelSet& y) {
  if (x.utterances.size() != y.utterances.size())
    raise(ErrorKind::invalid_input, "evaluate: feature/label utterance counts differ");
  const QuantForwardPlans plans = build_forward_plans(qm);
  std::size_t correct = 0, total = 0;
  for (std::size_t u = 0; u < x.utterances.size(); ++u) {
    if (x.utterances[u].rows != y.utterances[u].size())
      raise(ErrorKind::invalid_input, "evaluate: feature/label frame counts differ in utterance " + std::to_string(u));
    const Matrix out = forward_quantized_with_plans(qm, plans, x.utterances[u]);
    for (std::size_t t = 0; t < out.rows; ++t) {
      correct += argmax_row(out, t) == y.utterances[u][t];
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace tdnnq
