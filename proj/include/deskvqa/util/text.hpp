#pragma once

#include <algorithm>
#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace deskvqa::text {

inline bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

inline bool is_alnum(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

// ASCII-only: bytes >= 0x80 pass through untouched.
inline std::string casefold(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

/// Trims and collapses every internal whitespace run to a single space.
inline std::string collapse_whitespace(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (char c : s) {
    if (is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

/// Key used for answer matching and answer-space labels.
inline std::string normalize_answer(std::string_view s) { return casefold(collapse_whitespace(s)); }

/// Key used for duplicate detection of questions.
inline std::string question_key(std::string_view s) { return casefold(collapse_whitespace(s)); }

/// Lowercases, maps every non-alphanumeric run to one underscore, trims
/// leading/trailing underscores and truncates to max_len characters.
/// Truncation happens before the trailing underscore is dropped.
inline std::string sanitize_filename(std::string_view s, std::size_t max_len = 100) {
  std::string out;
  for (char c : casefold(s)) {
    if (is_alnum(c)) {
      out.push_back(c);
    } else if (!out.empty() && out.back() != '_') {
      out.push_back('_');
    }
  }
  if (out.size() > max_len) out.resize(max_len);
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out;
}

/// Splits on whitespace and punctuation after casefolding.
inline std::vector<std::string> word_split(std::string_view s) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : casefold(s)) {
    if (is_alnum(c) || static_cast<unsigned char>(c) >= 0x80) {
      cur.push_back(c);
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

inline std::string lowercase_extension(std::string_view filename) {
  auto dot = filename.rfind('.');
  if (dot == std::string_view::npos) return {};
  return casefold(filename.substr(dot + 1));
}

}  // namespace deskvqa::text
