#pragma once

#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deskvqa/features/region_features.hpp"
#include "deskvqa/model/trace.hpp"
#include "deskvqa/util/error.hpp"
#include "deskvqa/util/image.hpp"
#include "deskvqa/util/text.hpp"
#include "deskvqa/util/zip.hpp"
#include "deskvqa/viz/attention.hpp"

namespace deskvqa::viz {

struct AnnotationStyle {
  int top_k = 5;
  std::array<std::uint8_t, 3> colour = {200, 16, 16};
  std::vector<double> opacity = {1.0, 0.8, 0.6, 0.4, 0.25};  // by rank, rank 1 first
  int line_width = 3;
  bool label = true;

  void validate() const {
    if (top_k < 1) throw Error(ErrorKind::InvalidConfig, "top_k must be >= 1");
    if (line_width < 1) throw Error(ErrorKind::InvalidConfig, "line_width must be >= 1");
    if (opacity.size() < static_cast<std::size_t>(top_k)) {
      throw Error(ErrorKind::InvalidConfig, "need an opacity level for each of the top " + std::to_string(top_k));
    }
    for (std::size_t i = 0; i < opacity.size(); ++i) {
      if (!(opacity[i] > 0.0 && opacity[i] <= 1.0)) throw Error(ErrorKind::InvalidConfig, "opacity must be in (0, 1]");
      if (i > 0 && !(opacity[i] < opacity[i - 1])) {
        throw Error(ErrorKind::InvalidConfig, "opacity must strictly decrease with rank");
      }
    }
  }
};

/// Inclusive pixel rectangle.
struct PixelBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool contains(int x, int y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
  bool operator==(const PixelBox&) const = default;
};

/// Maps a normalized box onto pixel indices, clamping to the image. Returns
/// a warning text when clamping was needed.
inline PixelBox to_pixels(const features::Box& b, int width, int height, std::string* warning = nullptr) {
  for (float v : b) {
    if (!std::isfinite(v)) throw Error(ErrorKind::OutOfBounds, "box has a non-finite coordinate");
  }
  PixelBox p{static_cast<int>(std::lround(b[0] * width)), static_cast<int>(std::lround(b[1] * height)),
             static_cast<int>(std::lround(b[2] * width)) - 1, static_cast<int>(std::lround(b[3] * height)) - 1};
  PixelBox c{std::clamp(p.x0, 0, width - 1), std::clamp(p.y0, 0, height - 1), std::clamp(p.x1, 0, width - 1),
             std::clamp(p.y1, 0, height - 1)};
  c.x1 = std::max(c.x1, c.x0);
  c.y1 = std::max(c.y1, c.y0);
  if (warning) {
    warning->clear();
    if (!(c == PixelBox{p.x0, p.y0, std::max(p.x1, p.x0), std::max(p.y1, p.y0)})) {
      *warning = "OutOfBounds: box clamped to the image";
    }
  }
  return c;
}

/// True for pixels in the stroke band of width `line_width` along the box edge.
inline bool on_stroke(const PixelBox& b, int x, int y, int line_width) {
  if (!b.contains(x, y)) return false;
  return std::min({x - b.x0, b.x1 - x, y - b.y0, b.y1 - y}) < line_width;
}

struct Annotated {
  Image image;
  std::vector<std::uint8_t> png;
  std::vector<std::string> warnings;
};

namespace detail {

inline void blend(Image& img, int x, int y, const std::array<std::uint8_t, 3>& colour, double alpha) {
  auto* p = img.at(x, y);
  for (int c = 0; c < 3; ++c) {
    p[c] = static_cast<std::uint8_t>(std::lround(alpha * colour[c] + (1.0 - alpha) * p[c]));
  }
}

/// Rank number rendered into a mask, clipped to the box interior.
inline cv::Mat label_mask(const PixelBox& b, int rank, int line_width, int width, int height) {
  cv::Mat mask = cv::Mat::zeros(height, width, CV_8UC1);
  const std::string text = std::to_string(rank);
  int baseline = 0;
  const double scale = 0.4;
  auto size = cv::getTextSize(text, cv::FONT_HERSHEY_SIMPLEX, scale, 1, &baseline);
  cv::Point origin(b.x0 + line_width + 1, b.y0 + line_width + 1 + size.height);
  cv::putText(mask, text, origin, cv::FONT_HERSHEY_SIMPLEX, scale, cv::Scalar(255), 1, cv::LINE_8);
  cv::Mat clipped = cv::Mat::zeros(height, width, CV_8UC1);
  cv::Rect inside(b.x0, b.y0, b.x1 - b.x0 + 1, b.y1 - b.y0 + 1);
  mask(inside).copyTo(clipped(inside));
  return clipped;
}

}  // namespace detail

/// Draws the ranked regions onto a copy of the image, rank 1 last so it
/// stays on top, and encodes the result as PNG.
inline Annotated annotate(const Image& image, std::span<const features::Box> boxes,
                          const std::vector<RegionScore>& ranked, const AnnotationStyle& style = {}) {
  style.validate();
  if (image.width < 1 || image.height < 1) throw Error(ErrorKind::UnreadableImage, "image has no pixels");
  Annotated out;
  out.image = image;
  for (auto it = ranked.rbegin(); it != ranked.rend(); ++it) {
    if (it->region_index < 0 || static_cast<std::size_t>(it->region_index) >= boxes.size()) {
      throw Error(ErrorKind::ShapeError, "region " + std::to_string(it->region_index) + " has no box");
    }
    if (it->rank < 1 || it->rank > style.top_k) {
      throw Error(ErrorKind::InvalidConfig, "rank " + std::to_string(it->rank) + " outside 1.." +
                                                std::to_string(style.top_k));
    }
    std::string warning;
    auto box = to_pixels(boxes[static_cast<std::size_t>(it->region_index)], image.width, image.height, &warning);
    if (!warning.empty()) out.warnings.push_back("region " + std::to_string(it->region_index) + ": " + warning);
    const double alpha = style.opacity[static_cast<std::size_t>(it->rank - 1)];
    for (int y = box.y0; y <= box.y1; ++y) {
      for (int x = box.x0; x <= box.x1; ++x) {
        if (on_stroke(box, x, y, style.line_width)) detail::blend(out.image, x, y, style.colour, alpha);
      }
    }
    if (style.label) {
      auto mask = detail::label_mask(box, it->rank, style.line_width, image.width, image.height);
      for (int y = box.y0; y <= box.y1; ++y) {
        for (int x = box.x0; x <= box.x1; ++x) {
          if (mask.at<std::uint8_t>(y, x) && !on_stroke(box, x, y, style.line_width)) {
            detail::blend(out.image, x, y, style.colour, alpha);
          }
        }
      }
    }
  }
  out.png = image::encode_png(out.image);
  return out;
}

/// `<sanitized question>__<question id>.png`
inline std::string archive_name(std::string_view question, std::int64_t question_id) {
  auto stem = text::sanitize_filename(question, 100);
  if (stem.empty()) stem = "question";
  return stem + "__" + std::to_string(question_id) + ".png";
}

struct BatchItem {
  std::int64_t question_id = 0;
  std::string question;
  std::shared_ptr<const Image> image;  // null when the image could not be loaded
  std::string image_error;
  std::vector<features::Box> boxes;
  model::AttentionTrace trace;
  model::TokenMap token_map;
};

struct BatchArchive {
  std::vector<std::uint8_t> zip;
  std::vector<std::string> names;     // annotated images, in input order
  std::vector<std::string> errors;    // one line per failed item
  std::vector<std::string> warnings;  // clamped boxes
};

inline constexpr std::string_view kErrorManifest = "errors.txt";

/// Annotates every item into one ZIP. Failed items are listed in an error
/// manifest inside the archive and do not stop the batch.
inline BatchArchive annotate_batch(const std::vector<BatchItem>& items, const AnnotationStyle& style = {}) {
  style.validate();
  BatchArchive out;
  zip::Writer writer;
  for (const auto& item : items) {
    const auto name = archive_name(item.question, item.question_id);
    try {
      if (!item.image) {
        throw Error(ErrorKind::UnreadableImage, item.image_error.empty() ? "image unavailable" : item.image_error);
      }
      auto ranked = select_top(aggregate_attention(item.trace, item.token_map), style.top_k);
      auto a = annotate(*item.image, item.boxes, ranked, style);
      for (auto& w : a.warnings) out.warnings.push_back(name + ": " + w);
      writer.add(name, a.png, false);
      out.names.push_back(name);
    } catch (const std::exception& e) {
      out.errors.push_back(std::to_string(item.question_id) + "\t" + name + "\t" + e.what());
    }
  }
  if (!out.errors.empty()) {
    std::string manifest;
    for (const auto& line : out.errors) manifest += line + "\n";
    writer.add(kErrorManifest, manifest);
  }
  out.zip = std::move(writer).finish();
  return out;
}

}  // namespace deskvqa::viz
