#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "deskvqa/util/csv.hpp"
#include "deskvqa/util/error.hpp"
#include "deskvqa/util/fs.hpp"
#include "deskvqa/util/image.hpp"
#include "deskvqa/util/json.hpp"
#include "deskvqa/util/text.hpp"
#include "deskvqa/util/zip.hpp"

namespace deskvqa::data {

inline constexpr std::size_t kAnswersPerQuestion = 10;

enum class ImageStatus { valid, oversized, unreadable };

inline std::string_view to_string(ImageStatus s) {
  switch (s) {
    case ImageStatus::valid: return "valid";
    case ImageStatus::oversized: return "oversized";
    case ImageStatus::unreadable: return "unreadable";
  }
  return "unknown";
}

struct ImageRecord {
  std::string image_id;
  std::string filename;
  int width = 0;
  int height = 0;
  ImageStatus status = ImageStatus::unreadable;

  bool operator==(const ImageRecord&) const = default;
};

struct RawQARow {
  std::string image_id;
  std::string question;
  std::vector<std::string> answers;

  bool operator==(const RawQARow&) const = default;
};

struct QAEntry {
  std::int64_t question_id = 0;
  std::string image_id;
  std::string question;
  std::vector<std::string> answers;

  bool operator==(const QAEntry&) const = default;
};

struct CleanReport {
  std::size_t n_input_rows = 0;
  std::size_t n_autofilled = 0;
  std::size_t n_duplicates_removed = 0;
  std::size_t n_invalid_image_refs_removed = 0;
  std::size_t n_oversized_images = 0;
  std::size_t n_unreadable_images = 0;
  std::size_t n_output_entries = 0;

  bool identity_holds() const {
    return n_output_entries + n_duplicates_removed + n_invalid_image_refs_removed == n_input_rows;
  }
  bool operator==(const CleanReport&) const = default;
};

enum class Level { error, warning, success };

inline std::string_view to_string(Level l) {
  switch (l) {
    case Level::error: return "error";
    case Level::warning: return "warning";
    case Level::success: return "success";
  }
  return "unknown";
}

struct ValidationOutcome {
  Level level = Level::success;
  std::vector<std::string> messages;
};

/// Images pulled out of an uploaded archive. contents[i] holds the bytes
/// behind records[i].
struct ImageIngest {
  std::vector<ImageRecord> records;
  std::vector<zip::Bytes> contents;
  std::vector<std::string> warnings;

  const zip::Bytes* content_of(std::string_view image_id) const {
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].image_id == image_id) return &contents[i];
    }
    return nullptr;
  }
};

namespace detail {

inline bool is_image_extension(std::string_view ext) {
  return ext == "png" || ext == "jpg" || ext == "jpeg" || ext == "bmp";
}

inline std::string basename(std::string_view path) {
  auto slash = path.find_last_of("/\\");
  return std::string(slash == std::string_view::npos ? path : path.substr(slash + 1));
}

inline std::string stem(std::string_view filename) {
  auto dot = filename.rfind('.');
  return std::string(dot == std::string_view::npos ? filename : filename.substr(0, dot));
}

inline bool is_metadata_entry(std::string_view path) {
  return path.find("__MACOSX/") != std::string_view::npos || basename(path).starts_with("._");
}

}  // namespace detail

inline ImageRecord classify_image(std::string image_id, std::string filename, std::span<const std::uint8_t> bytes) {
  ImageRecord rec{std::move(image_id), std::move(filename), 0, 0, ImageStatus::unreadable};
  if (auto img = image::try_decode(bytes)) {
    rec.width = img->width;
    rec.height = img->height;
    rec.status = image::within_limits(img->width, img->height) ? ImageStatus::valid : ImageStatus::oversized;
  }
  return rec;
}

/// Reads every png/jpg/jpeg/bmp member of the archive, flattening folders.
/// A repeated image_id keeps the first member and records a warning.
inline ImageIngest ingest_images(std::span<const std::uint8_t> archive) {
  zip::Reader reader(archive);
  ImageIngest out;
  std::unordered_set<std::string> seen;
  for (const auto& entry : reader.entries()) {
    if (entry.is_directory || detail::is_metadata_entry(entry.name)) continue;
    auto filename = detail::basename(entry.name);
    if (!detail::is_image_extension(text::lowercase_extension(filename))) continue;
    auto id = detail::stem(filename);
    if (!seen.insert(id).second) {
      out.warnings.push_back("DuplicateImageId: '" + id + "' appears more than once; kept the first (" + entry.name +
                             " ignored)");
      continue;
    }
    auto bytes = reader.read(entry);
    out.records.push_back(classify_image(id, filename, bytes));
    out.contents.push_back(std::move(bytes));
  }
  return out;
}

/// Header must name image_id and question; answer1..answer10 are optional.
/// Header names are matched after trimming and casefolding.
inline std::vector<RawQARow> parse_qa_csv(std::string_view data) {
  auto rows = csv::parse(data);
  if (rows.empty()) throw Error(ErrorKind::EmptyFile, "CSV has no header row");

  const auto& header = rows.front();
  std::optional<std::size_t> id_col, q_col;
  std::vector<std::pair<int, std::size_t>> answer_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    auto name = text::casefold(text::trim(header[c]));
    if (name == "image_id") {
      id_col = c;
    } else if (name == "question") {
      q_col = c;
    } else if (name.starts_with("answer") && name.size() > 6) {
      auto suffix = name.substr(6);
      if (std::all_of(suffix.begin(), suffix.end(), [](char ch) { return ch >= '0' && ch <= '9'; }) &&
          suffix.size() <= 2) {
        int n = std::stoi(suffix);
        if (n >= 1 && n <= static_cast<int>(kAnswersPerQuestion)) answer_cols.emplace_back(n, c);
      }
    }
  }
  if (!id_col) throw Error(ErrorKind::MissingColumn, "CSV header lacks 'image_id'");
  if (!q_col) throw Error(ErrorKind::MissingColumn, "CSV header lacks 'question'");
  std::sort(answer_cols.begin(), answer_cols.end());

  std::vector<RawQARow> out;
  out.reserve(rows.size() - 1);
  auto cell = [](const csv::Row& r, std::size_t c) -> std::string { return c < r.size() ? r[c] : std::string(); };
  for (std::size_t r = 1; r < rows.size(); ++r) {
    RawQARow row;
    row.image_id = text::trim(cell(rows[r], *id_col));
    row.question = cell(rows[r], *q_col);
    for (auto [n, c] : answer_cols) {
      auto a = text::trim(cell(rows[r], c));
      if (!a.empty()) row.answers.push_back(std::move(a));
    }
    out.push_back(std::move(row));
  }
  if (out.empty()) throw Error(ErrorKind::EmptyFile, "CSV has no data rows");
  return out;
}

struct Autofill {
  std::vector<std::string> answers;
  bool was_autofilled = false;
};

/// Repeats the provided answers cyclically, in order, up to ten.
inline Autofill autofill_answers(const RawQARow& row) {
  std::vector<std::string> given;
  for (const auto& a : row.answers) {
    auto t = text::trim(a);
    if (!t.empty()) given.push_back(std::move(t));
  }
  if (given.empty()) throw Error(ErrorKind::NoAnswers, "question '" + row.question + "' has no answers");
  if (given.size() >= kAnswersPerQuestion) {
    given.resize(kAnswersPerQuestion);
    return {std::move(given), false};
  }
  Autofill out;
  out.was_autofilled = true;
  out.answers.reserve(kAnswersPerQuestion);
  for (std::size_t i = 0; i < kAnswersPerQuestion; ++i) out.answers.push_back(given[i % given.size()]);
  return out;
}

template <class T>
struct Filtered {
  std::vector<T> rows;
  std::size_t removed = 0;
};

/// Keeps the first row of each (image_id, normalized question) pair.
inline Filtered<RawQARow> dedupe(std::vector<RawQARow> rows) {
  Filtered<RawQARow> out;
  std::set<std::pair<std::string, std::string>> seen;
  for (auto& r : rows) {
    if (seen.emplace(r.image_id, text::question_key(r.question)).second) {
      out.rows.push_back(std::move(r));
    } else {
      ++out.removed;
    }
  }
  return out;
}

inline Filtered<RawQARow> drop_invalid_refs(std::vector<RawQARow> rows, std::span<const ImageRecord> images) {
  std::unordered_set<std::string> valid;
  for (const auto& img : images) {
    if (img.status == ImageStatus::valid) valid.insert(img.image_id);
  }
  Filtered<RawQARow> out;
  for (auto& r : rows) {
    if (valid.contains(r.image_id)) {
      out.rows.push_back(std::move(r));
    } else {
      ++out.removed;
    }
  }
  return out;
}

/// VQA soft score: min(#matching answers / 3, 1), matching after
/// casefold/trim/whitespace collapse.
inline double soft_target(std::span<const std::string> answers, std::string_view candidate) {
  auto key = text::normalize_answer(candidate);
  std::size_t matches = 0;
  for (const auto& a : answers) {
    if (text::normalize_answer(a) == key) ++matches;
  }
  return std::min(static_cast<double>(matches) / 3.0, 1.0);
}

struct BuiltDataset {
  std::vector<QAEntry> entries;
  ImageIngest images;
  CleanReport report;
  ValidationOutcome outcome;
};

inline ValidationOutcome evaluate_outcome(const CleanReport& report, std::size_t n_valid_images,
                                          std::vector<std::string> extra_messages = {}) {
  ValidationOutcome out;
  const std::size_t bad_images = report.n_oversized_images + report.n_unreadable_images;
  if (n_valid_images == 0) {
    out.level = Level::error;
    out.messages.push_back("No valid image was found in the uploaded archive. Please upload a new image folder.");
  } else if (report.n_output_entries == 0) {
    out.level = Level::error;
    out.messages.push_back("No valid question entry remains after cleaning. Please check the CSV file.");
  } else if (bad_images > 0) {
    out.level = Level::warning;
    if (report.n_oversized_images) {
      out.messages.push_back(std::to_string(report.n_oversized_images) +
                             " image(s) exceed 1920 pixels in width or height and will be left out. "
                             "You can fine-tune without them or resubmit the images.");
    }
    if (report.n_unreadable_images) {
      out.messages.push_back(std::to_string(report.n_unreadable_images) + " image(s) could not be read.");
    }
  } else {
    out.level = Level::success;
    out.messages.push_back("All images meet the constraints. " + std::to_string(report.n_output_entries) +
                           " question(s) ready for fine-tuning.");
  }
  for (auto& m : extra_messages) out.messages.push_back(std::move(m));
  return out;
}

/// ingest -> parse -> dedupe -> drop_invalid_refs -> autofill. Rows without
/// any answer are dropped at the autofill step and counted with the invalid
/// rows so the report identity still holds.
inline BuiltDataset build_dataset(std::span<const std::uint8_t> archive, std::string_view csv_text) {
  BuiltDataset out;
  std::vector<RawQARow> rows;
  try {
    out.images = ingest_images(archive);
    rows = parse_qa_csv(csv_text);
  } catch (const Error& e) {
    out.outcome.level = Level::error;
    out.outcome.messages.push_back(e.what());
    return out;
  }

  std::size_t n_valid_images = 0;
  for (const auto& img : out.images.records) {
    switch (img.status) {
      case ImageStatus::valid: ++n_valid_images; break;
      case ImageStatus::oversized: ++out.report.n_oversized_images; break;
      case ImageStatus::unreadable: ++out.report.n_unreadable_images; break;
    }
  }

  out.report.n_input_rows = rows.size();
  auto deduped = dedupe(std::move(rows));
  out.report.n_duplicates_removed = deduped.removed;
  auto referenced = drop_invalid_refs(std::move(deduped.rows), out.images.records);
  out.report.n_invalid_image_refs_removed = referenced.removed;

  std::vector<std::string> notes = out.images.warnings;
  std::size_t no_answer = 0, no_question = 0;
  for (auto& row : referenced.rows) {
    auto question = text::collapse_whitespace(row.question);
    if (question.empty()) {
      ++no_question;
      continue;
    }
    Autofill filled;
    try {
      filled = autofill_answers(row);
    } catch (const Error&) {
      ++no_answer;
      continue;
    }
    if (filled.was_autofilled) ++out.report.n_autofilled;
    QAEntry e;
    e.question_id = static_cast<std::int64_t>(out.entries.size());
    e.image_id = row.image_id;
    e.question = std::move(question);
    e.answers = std::move(filled.answers);
    out.entries.push_back(std::move(e));
  }
  out.report.n_invalid_image_refs_removed += no_answer + no_question;
  out.report.n_output_entries = out.entries.size();

  if (no_answer) notes.push_back(std::to_string(no_answer) + " question(s) had no answers and were removed.");
  if (no_question) notes.push_back(std::to_string(no_question) + " row(s) had an empty question and were removed.");
  if (out.report.n_duplicates_removed) {
    notes.push_back(std::to_string(out.report.n_duplicates_removed) + " duplicated image-question pair(s) removed.");
  }
  if (referenced.removed) {
    notes.push_back(std::to_string(referenced.removed) + " question(s) without a valid image id removed.");
  }
  if (out.report.n_autofilled) {
    notes.push_back(std::to_string(out.report.n_autofilled) + " question(s) had fewer than 10 answers and were auto-filled.");
  }
  out.outcome = evaluate_outcome(out.report, n_valid_images, std::move(notes));
  return out;
}

// ---- serialization ---------------------------------------------------------

inline nlohmann::ordered_json to_json(const CleanReport& r) {
  return {{"n_input_rows", r.n_input_rows},
          {"n_autofilled", r.n_autofilled},
          {"n_duplicates_removed", r.n_duplicates_removed},
          {"n_invalid_image_refs_removed", r.n_invalid_image_refs_removed},
          {"n_oversized_images", r.n_oversized_images},
          {"n_unreadable_images", r.n_unreadable_images},
          {"n_output_entries", r.n_output_entries}};
}

inline nlohmann::ordered_json to_json(const ValidationOutcome& o) {
  return {{"level", to_string(o.level)}, {"messages", o.messages}};
}

inline nlohmann::ordered_json to_json(const ImageRecord& r) {
  return {{"image_id", r.image_id},
          {"filename", r.filename},
          {"width", r.width},
          {"height", r.height},
          {"status", to_string(r.status)}};
}

inline nlohmann::ordered_json dataset_to_json(std::span<const QAEntry> entries) {
  auto questions = nlohmann::ordered_json::array();
  auto annotations = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    questions.push_back({{"question_id", e.question_id}, {"image_id", e.image_id}, {"question", e.question}});
    annotations.push_back({{"question_id", e.question_id}, {"image_id", e.image_id}, {"answers", e.answers}});
  }
  return {{"questions", std::move(questions)}, {"annotations", std::move(annotations)}};
}

inline std::vector<QAEntry> dataset_from_json(const nlohmann::json& doc) {
  std::map<std::int64_t, QAEntry> by_id;
  for (const auto& q : doc.at("questions")) {
    QAEntry e;
    e.question_id = q.at("question_id").get<std::int64_t>();
    e.image_id = q.at("image_id").get<std::string>();
    e.question = q.at("question").get<std::string>();
    by_id[e.question_id] = std::move(e);
  }
  for (const auto& a : doc.at("annotations")) {
    auto it = by_id.find(a.at("question_id").get<std::int64_t>());
    if (it == by_id.end()) throw Error(ErrorKind::SchemaViolation, "annotation without question");
    it->second.answers = a.at("answers").get<std::vector<std::string>>();
  }
  std::vector<QAEntry> out;
  for (auto& [id, e] : by_id) {
    if (e.answers.size() != kAnswersPerQuestion) {
      throw Error(ErrorKind::SchemaViolation, "question " + std::to_string(id) + " does not have 10 answers");
    }
    out.push_back(std::move(e));
  }
  return out;
}

/// On-disk layout of one cleaned dataset:
///   dataset.json  questions + annotations
///   report.json   cleaning counters
///   images.json   every ingested image record
///   images/<image_id>.<ext>   bytes of every valid image
struct DatasetPaths {
  std::filesystem::path root;

  std::filesystem::path dataset() const { return root / "dataset.json"; }
  std::filesystem::path report() const { return root / "report.json"; }
  std::filesystem::path images_manifest() const { return root / "images.json"; }
  std::filesystem::path images_dir() const { return root / "images"; }
  std::filesystem::path features_dir() const { return root / "features"; }
};

inline void persist_dataset(const DatasetPaths& paths, const BuiltDataset& built) {
  std::filesystem::create_directories(paths.images_dir());
  fsutil::write_atomic(paths.dataset(), dump_document(dataset_to_json(built.entries)));
  fsutil::write_atomic(paths.report(), dump_document(to_json(built.report)));
  auto manifest = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < built.images.records.size(); ++i) {
    const auto& rec = built.images.records[i];
    manifest.push_back(to_json(rec));
    if (rec.status == ImageStatus::valid) {
      fsutil::write_atomic(paths.images_dir() / rec.filename, built.images.contents[i]);
    }
  }
  fsutil::write_atomic(paths.images_manifest(), dump_document(manifest));
}

struct StoredImage {
  std::string image_id;
  std::filesystem::path path;
};

/// Loads the cleaned entries and the valid image files of a persisted dataset.
struct LoadedDataset {
  std::vector<QAEntry> entries;
  std::vector<StoredImage> images;
};

inline LoadedDataset load_dataset(const DatasetPaths& paths) {
  LoadedDataset out;
  out.entries = dataset_from_json(nlohmann::json::parse(fsutil::read_text(paths.dataset())));
  auto manifest = nlohmann::json::parse(fsutil::read_text(paths.images_manifest()));
  for (const auto& rec : manifest) {
    if (rec.at("status").get<std::string>() != "valid") continue;
    out.images.push_back({rec.at("image_id").get<std::string>(),
                          paths.images_dir() / rec.at("filename").get<std::string>()});
  }
  return out;
}

}  // namespace deskvqa::data
