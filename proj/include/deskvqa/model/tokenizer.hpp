#pragma once

#include <algorithm>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "deskvqa/util/error.hpp"
#include "deskvqa/util/text.hpp"

namespace deskvqa::model {

/// Word-level vocabulary. Ids 0..3 are reserved for the special tokens;
/// words follow in lexicographic order.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kFirstWord = 4;

  Vocab() : words_{"[PAD]", "[UNK]", "[CLS]", "[SEP]"} { reindex(); }

  explicit Vocab(std::vector<std::string> tokens) : words_(std::move(tokens)) {
    if (words_.size() < kFirstWord) throw Error(ErrorKind::CorruptArtifact, "vocabulary lacks special tokens");
    reindex();
  }

  /// Every word seen at least min_frequency times across the questions.
  static Vocab build(std::span<const std::string> questions, int min_frequency = 1) {
    std::map<std::string, int> counts;
    for (const auto& q : questions) {
      for (auto& w : text::word_split(q)) ++counts[w];
    }
    Vocab v;
    for (const auto& [w, n] : counts) {
      if (n >= min_frequency) v.words_.push_back(w);
    }
    v.reindex();
    return v;
  }

  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& tokens() const { return words_; }

  int id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    return it == index_.end() ? kUnk : it->second;
  }

  bool operator==(const Vocab& o) const { return words_ == o.words_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = kFirstWord; i < words_.size(); ++i) index_.emplace(words_[i], static_cast<int>(i));
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

/// Casefolded word ids, truncated or padded with kPad to exactly max_tokens.
inline std::vector<int> tokenize(std::string_view question, const Vocab& vocab, int max_tokens) {
  auto words = text::word_split(question);
  if (words.empty()) throw Error(ErrorKind::EmptyQuestion, "question contains no words");
  std::vector<int> ids(static_cast<std::size_t>(max_tokens), Vocab::kPad);
  const auto n = std::min<std::size_t>(words.size(), ids.size());
  for (std::size_t i = 0; i < n; ++i) ids[i] = vocab.id(words[i]);
  return ids;
}

}  // namespace deskvqa::model
