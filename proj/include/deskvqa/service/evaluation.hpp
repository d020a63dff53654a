#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deskvqa/data/dataset.hpp"
#include "deskvqa/features/extractors.hpp"
#include "deskvqa/model/artifact.hpp"
#include "deskvqa/train/predict.hpp"
#include "deskvqa/util/csv.hpp"
#include "deskvqa/util/image.hpp"
#include "deskvqa/viz/annotate.hpp"

namespace deskvqa::service {

/// A loaded artifact plus the extractor that reproduces its training
/// features. Predictions are serialized through one mutex.
class EvalModel {
 public:
  EvalModel(model::ModelArtifact artifact, features::ExtractorSpec fallback)
      : artifact_(std::move(artifact)), extractor_(features::make_extractor(extraction_spec(artifact_, fallback))) {}

  static std::shared_ptr<EvalModel> load(const std::filesystem::path& path, const features::ExtractorSpec& fallback) {
    return std::make_shared<EvalModel>(model::load_model(path), fallback);
  }

  const model::ModelArtifact& artifact() const { return artifact_; }
  const features::Extractor& extractor() const { return *extractor_; }

  train::Prediction predict(std::string_view question, const features::RegionFeatures& regions, int k) const {
    std::lock_guard lock(mutex_);
    return train::predict(artifact_, question, regions, k);
  }

  /// The artifact's recorded spec; older artifacts without one fall back to
  /// the server's extractor resized to the model's input shape.
  static features::ExtractorSpec extraction_spec(const model::ModelArtifact& a, features::ExtractorSpec fallback) {
    if (a.extractor) return *a.extractor;
    fallback.feature_dim = a.model.config().feature_dim;
    fallback.max_regions = a.model.config().max_regions;
    return fallback;
  }

 private:
  model::ModelArtifact artifact_;
  std::unique_ptr<features::Extractor> extractor_;
  mutable std::mutex mutex_;
};

/// Decodes an uploaded image and enforces the dataset size rule.
inline Image decode_upload(std::span<const std::uint8_t> bytes) {
  auto img = image::try_decode(bytes);
  if (!img) throw Error(ErrorKind::UnreadableImage, "the image could not be decoded");
  if (!image::within_limits(img->width, img->height)) {
    throw Error(ErrorKind::OutOfBounds, "the image is " + std::to_string(img->width) + "x" +
                                            std::to_string(img->height) + ", larger than " +
                                            std::to_string(image::kMaxSide) + " pixels per side");
  }
  return std::move(*img);
}

struct SingleAnswer {
  std::string answer;
  double probability = 0.0;
  std::vector<train::ScoredAnswer> top;
  std::vector<viz::RegionScore> ranked;
  std::vector<features::Box> boxes;
  viz::Annotated annotated;
};

/// features -> predict -> aggregate attention -> top regions -> annotate.
inline SingleAnswer evaluate_single(const EvalModel& model, std::span<const std::uint8_t> image_bytes,
                                    std::string_view question, const viz::AnnotationStyle& style = {},
                                    std::string_view image_id = "upload") {
  if (text::collapse_whitespace(question).empty()) throw Error(ErrorKind::EmptyQuestion, "the question is empty");
  auto img = decode_upload(image_bytes);
  auto regions = model.extractor().extract(image_id, image_bytes);
  auto prediction = model.predict(question, regions, 5);
  SingleAnswer out;
  out.answer = prediction.top.front().answer;
  out.probability = prediction.top.front().probability;
  out.top = prediction.top;
  out.ranked = viz::select_top(viz::aggregate_attention(prediction.trace, prediction.token_map), style.top_k);
  out.boxes = regions.boxes;
  out.annotated = viz::annotate(img, regions.boxes, out.ranked, style);
  return out;
}

struct BatchRow {
  std::int64_t question_id = 0;
  std::string image_id;
  std::string question;
  std::string answer;
  double probability = 0.0;
};

struct BatchEvaluation {
  std::vector<BatchRow> rows;
  std::vector<std::string> failures;  // one line per skipped CSV row
  viz::BatchArchive archive;

  std::size_t n_processed() const { return rows.size(); }
  std::size_t n_failed() const { return failures.size(); }

  std::string results_csv() const {
    std::vector<csv::Row> table = {{"question_id", "image_id", "question", "predicted_answer", "probability"}};
    for (const auto& r : rows) {
      char prob[32];
      std::snprintf(prob, sizeof prob, "%.6f", r.probability);
      table.push_back({std::to_string(r.question_id), r.image_id, r.question, r.answer, prob});
    }
    return csv::format(table);
  }
};

/// Answers every CSV row whose image is present and valid; other rows are
/// skipped and listed in `failures`. Answer columns, if any, are ignored.
/// Throws for an unreadable archive or a CSV without the required columns.
inline BatchEvaluation evaluate_batch(const EvalModel& model, std::span<const std::uint8_t> archive,
                                      std::string_view csv_text, const viz::AnnotationStyle& style = {}) {
  auto images = data::ingest_images(archive);
  auto rows = data::parse_qa_csv(csv_text);

  struct Prepared {
    std::shared_ptr<const Image> image;
    features::RegionFeatures regions;
    std::string error;
  };
  std::map<std::string, Prepared> prepared;
  auto prepare = [&](const std::string& image_id) -> const Prepared& {
    auto it = prepared.find(image_id);
    if (it != prepared.end()) return it->second;
    Prepared p;
    const auto* bytes = images.content_of(image_id);
    if (!bytes) {
      p.error = "image '" + image_id + "' is not in the archive";
    } else {
      try {
        p.image = std::make_shared<const Image>(decode_upload(*bytes));
        p.regions = model.extractor().extract(image_id, *bytes);
      } catch (const std::exception& e) {
        p.image.reset();
        p.error = "image '" + image_id + "': " + e.what();
      }
    }
    return prepared.emplace(image_id, std::move(p)).first->second;
  };

  BatchEvaluation out;
  std::vector<viz::BatchItem> items;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    const auto qid = static_cast<std::int64_t>(i);
    auto question = text::collapse_whitespace(row.question);
    if (question.empty()) {
      out.failures.push_back("row " + std::to_string(qid) + ": empty question");
      continue;
    }
    const auto& p = prepare(row.image_id);
    if (!p.image) {
      out.failures.push_back("row " + std::to_string(qid) + ": " + p.error);
      continue;
    }
    auto prediction = model.predict(question, p.regions, 1);
    out.rows.push_back({qid, row.image_id, question, prediction.top.front().answer, prediction.top.front().probability});
    viz::BatchItem item;
    item.question_id = qid;
    item.question = question;
    item.image = p.image;
    item.boxes = p.regions.boxes;
    item.trace = std::move(prediction.trace);
    item.token_map = std::move(prediction.token_map);
    items.push_back(std::move(item));
  }
  out.archive = viz::annotate_batch(items, style);
  return out;
}

}  // namespace deskvqa::service
