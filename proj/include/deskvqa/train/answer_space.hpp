#pragma once

#include <algorithm>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "deskvqa/data/dataset.hpp"
#include "deskvqa/util/error.hpp"
#include "deskvqa/util/text.hpp"

namespace deskvqa::train {

/// Normalized answers the classifier can emit, most frequent first.
struct AnswerSpace {
  std::vector<std::string> labels;
  std::unordered_map<std::string, int> index;
  int min_count = 1;

  int size() const { return static_cast<int>(labels.size()); }

  /// Position of an answer after normalization, or -1.
  int find(std::string_view answer) const {
    auto it = index.find(text::normalize_answer(answer));
    return it == index.end() ? -1 : it->second;
  }

  static AnswerSpace from_labels(std::vector<std::string> labels, int min_count = 1) {
    AnswerSpace s;
    s.labels = std::move(labels);
    s.min_count = min_count;
    for (int i = 0; i < s.size(); ++i) s.index.emplace(s.labels[i], i);
    return s;
  }
};

inline AnswerSpace build_answer_space(std::span<const data::QAEntry> entries, int min_count = 1) {
  if (entries.empty()) throw Error(ErrorKind::EmptyAnswerSpace, "dataset has no entries");
  std::map<std::string, int> counts;
  for (const auto& e : entries) {
    for (const auto& a : e.answers) {
      auto key = text::normalize_answer(a);
      if (!key.empty()) ++counts[key];
    }
  }
  std::vector<std::pair<std::string, int>> kept;
  for (auto& [label, n] : counts) {
    if (n >= min_count) kept.emplace_back(label, n);
  }
  if (kept.empty()) {
    throw Error(ErrorKind::EmptyAnswerSpace, "no answer occurs at least " + std::to_string(min_count) + " times");
  }
  // counts is already lexicographic, so a stable sort by count keeps ties in order.
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> labels;
  labels.reserve(kept.size());
  for (auto& [label, _] : kept) labels.push_back(label);
  return AnswerSpace::from_labels(std::move(labels), min_count);
}

/// Soft target per label: min(matching answers / 3, 1). Answers outside the
/// space are dropped.
inline std::vector<double> make_targets(const data::QAEntry& entry, const AnswerSpace& space) {
  std::vector<double> t(space.labels.size(), 0.0);
  std::vector<int> matches(space.labels.size(), 0);
  for (const auto& a : entry.answers) {
    int i = space.find(a);
    if (i >= 0) ++matches[i];
  }
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::min(matches[i] / 3.0, 1.0);
  return t;
}

}  // namespace deskvqa::train
