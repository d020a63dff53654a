#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "deskvqa/model/trace.hpp"
#include "deskvqa/util/error.hpp"

namespace deskvqa::viz {

struct RegionScore {
  int region_index = 0;
  double score = 0.0;
  int rank = 0;  // 1-based once selected, 0 before

  bool operator==(const RegionScore&) const = default;
};

/// Single-stream traces contribute every joint matrix; dual-stream traces
/// contribute only language-to-vision cross attention.
inline bool contributes(const model::AttentionMatrix& m) {
  return m.encoder == model::SubEncoder::joint || m.encoder == model::SubEncoder::cross_lang_to_vision;
}

/// Summed attention received by every joint position from the non-padding
/// query rows of the contributing matrices.
inline std::vector<double> key_totals(const model::AttentionTrace& trace, const model::TokenMap& map) {
  std::vector<double> totals(static_cast<std::size_t>(std::max(map.total_len, 0)), 0.0);
  for (const auto& m : trace.matrices) {
    if (!contributes(m)) continue;
    const auto& w = m.weights;
    if (m.query_offset < 0 || m.key_offset < 0 || m.query_offset + w.rows() > map.total_len ||
        m.key_offset + w.cols() > map.total_len) {
      throw Error(ErrorKind::TokenMapMismatch, "attention matrix at layer " + std::to_string(m.layer) +
                                                   " does not fit a sequence of length " +
                                                   std::to_string(map.total_len));
    }
    for (Eigen::Index q = 0; q < w.rows(); ++q) {
      if (map.is_padding(m.query_offset + static_cast<int>(q))) continue;
      for (Eigen::Index k = 0; k < w.cols(); ++k) totals[static_cast<std::size_t>(m.key_offset + k)] += w(q, k);
    }
  }
  return totals;
}

/// One score per region, in region order.
inline std::vector<RegionScore> aggregate_attention(const model::AttentionTrace& trace, const model::TokenMap& map) {
  const auto& regions = map.region_positions;
  if (regions.begin < 0 || regions.end < regions.begin || regions.end > map.total_len) {
    throw Error(ErrorKind::TokenMapMismatch, "region positions fall outside the sequence");
  }
  for (const auto& m : trace.matrices) {
    if (!contributes(m)) continue;
    if (regions.begin < m.key_offset || regions.end > m.key_offset + m.weights.cols()) {
      throw Error(ErrorKind::TokenMapMismatch, "region positions exceed attention matrix width at layer " +
                                                   std::to_string(m.layer));
    }
  }
  auto totals = key_totals(trace, map);
  std::vector<RegionScore> out;
  out.reserve(static_cast<std::size_t>(regions.size()));
  for (int j = 0; j < regions.size(); ++j) out.push_back({j, totals[static_cast<std::size_t>(regions.begin + j)], 0});
  return out;
}

/// The min(k, N) highest scores, descending, ties by lower region index.
inline std::vector<RegionScore> select_top(std::vector<RegionScore> scores, int k = 5) {
  if (k < 1) throw Error(ErrorKind::InvalidConfig, "top_k must be >= 1");
  std::stable_sort(scores.begin(), scores.end(), [](const RegionScore& a, const RegionScore& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.region_index < b.region_index;
  });
  scores.resize(std::min(scores.size(), static_cast<std::size_t>(k)));
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i].rank = static_cast<int>(i) + 1;
  return scores;
}

}  // namespace deskvqa::viz
