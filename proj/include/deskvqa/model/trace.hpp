#pragma once

#include <Eigen/Dense>

#include <string_view>
#include <vector>

namespace deskvqa::model {

/// Which attention block produced a matrix. Single-stream models only emit
/// `joint`; the dual-stream tags name the query/key streams.
enum class SubEncoder { joint, language, vision, cross_lang_to_vision, cross_vision_to_lang };

inline std::string_view to_string(SubEncoder e) {
  switch (e) {
    case SubEncoder::joint: return "joint";
    case SubEncoder::language: return "language";
    case SubEncoder::vision: return "vision";
    case SubEncoder::cross_lang_to_vision: return "cross_lang_to_vision";
    case SubEncoder::cross_vision_to_lang: return "cross_vision_to_lang";
  }
  return "unknown";
}

struct IndexRange {
  int begin = 0;
  int end = 0;

  int size() const { return end - begin; }
  bool contains(int i) const { return i >= begin && i < end; }
  bool operator==(const IndexRange&) const = default;
};

/// Positions in the joint index space [0, total_len). For dual-stream
/// models the language tokens come first and regions follow.
struct TokenMap {
  int total_len = 0;
  IndexRange question_positions;
  IndexRange region_positions;
  std::vector<int> special_positions;

  bool is_padding(int pos) const {
    if (question_positions.contains(pos) || region_positions.contains(pos)) return false;
    for (int s : special_positions) {
      if (s == pos) return false;
    }
    return true;
  }

  int n_non_padding() const {
    return question_positions.size() + region_positions.size() + static_cast<int>(special_positions.size());
  }

  bool operator==(const TokenMap&) const = default;
};

/// Row-stochastic attention weights of one head. Row q, column k is the
/// attention from joint position query_offset + q to key_offset + k.
struct AttentionMatrix {
  SubEncoder encoder = SubEncoder::joint;
  int layer = 0;
  int head = 0;
  bool after_cross = false;  // dual-stream self-attention inside a cross layer
  int query_offset = 0;
  int key_offset = 0;
  Eigen::MatrixXd weights;
};

struct AttentionTrace {
  int n_heads = 0;
  std::vector<AttentionMatrix> matrices;

  std::size_t count(SubEncoder e) const {
    std::size_t n = 0;
    for (const auto& m : matrices) n += m.encoder == e;
    return n;
  }
};

}  // namespace deskvqa::model
