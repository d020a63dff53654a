#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "deskvqa/data/dataset.hpp"
#include "deskvqa/model/artifact.hpp"
#include "deskvqa/train/trainer.hpp"

namespace deskvqa::train {

struct ScoredAnswer {
  std::string answer;
  double probability = 0.0;
  int index = 0;  // position in the answer space
};

struct Prediction {
  std::vector<ScoredAnswer> top;
  model::AttentionTrace trace;
  model::TokenMap token_map;
};

/// Indices of the k largest values, descending, ties by lower index.
inline std::vector<int> rank_indices(const std::vector<double>& values, int k) {
  std::vector<int> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return values[a] > values[b]; });
  idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(std::max(k, 0))));
  return idx;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Prediction predict(const model::ModelArtifact& a, std::string_view question,
                          const features::RegionFeatures& regions, int k = 5) {
  if (k < 1) throw Error(ErrorKind::InvalidConfig, "k must be >= 1");
  auto ids = model::tokenize(question, a.vocab, a.model.config().max_question_tokens);
  auto out = a.model.forward(ids, regions);
  // Rank on logits: sigmoid is monotone, and saturated probabilities would
  // otherwise collapse distinct logits into ties.
  Prediction p;
  for (int i : rank_indices(out.logits, k)) p.top.push_back({a.answers[i], sigmoid(out.logits[i]), i});
  p.trace = std::move(out.trace);
  p.token_map = std::move(out.token_map);
  return p;
}

/// Mean soft score of the top-1 answer against each entry's ten answers.
inline double soft_accuracy(const model::ModelArtifact& a, std::span<const data::QAEntry> entries,
                            const FeatureMap& features) {
  if (entries.empty()) return 0.0;
  double total = 0.0;
  for (const auto& e : entries) {
    auto it = features.find(e.image_id);
    if (it == features.end()) throw Error(ErrorKind::Io, "no features for image '" + e.image_id + "'");
    auto p = predict(a, e.question, it->second, 1);
    total += data::soft_target(e.answers, p.top.front().answer);
  }
  return total / static_cast<double>(entries.size());
}

}  // namespace deskvqa::train
