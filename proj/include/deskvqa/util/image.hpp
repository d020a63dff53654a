#pragma once

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "deskvqa/util/error.hpp"

namespace deskvqa {

/// Interleaved 8-bit RGB pixels, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {}

  std::uint8_t* at(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* at(int x, int y) const { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }

  bool operator==(const Image&) const = default;
};

namespace image {

inline constexpr int kMaxSide = 1920;

struct Dimensions {
  int width = 0;
  int height = 0;
};

inline bool within_limits(int width, int height) { return width <= kMaxSide && height <= kMaxSide; }

inline cv::Mat as_mat(const Image& img) {
  return cv::Mat(img.height, img.width, CV_8UC3, const_cast<std::uint8_t*>(img.rgb.data()));
}

/// Decodes PNG/JPEG/BMP bytes. Returns nullopt when the bytes are not a decodable image.
inline std::optional<Image> try_decode(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) return std::nullopt;
  cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
  cv::Mat bgr;
  try {
    bgr = cv::imdecode(raw, cv::IMREAD_COLOR);
  } catch (const cv::Exception&) {
    return std::nullopt;
  }
  if (bgr.empty()) return std::nullopt;
  Image out(bgr.cols, bgr.rows);
  cv::Mat dst = as_mat(out);
  cv::cvtColor(bgr, dst, cv::COLOR_BGR2RGB);
  return out;
}

inline Image decode(std::span<const std::uint8_t> bytes) {
  auto img = try_decode(bytes);
  if (!img) throw Error(ErrorKind::UnreadableImage, "could not decode image");
  return std::move(*img);
}

/// PNG with fixed encoder settings, so identical pixels give identical bytes.
inline std::vector<std::uint8_t> encode_png(const Image& img) {
  cv::Mat bgr;
  cv::cvtColor(as_mat(img), bgr, cv::COLOR_RGB2BGR);
  std::vector<std::uint8_t> out;
  cv::imencode(".png", bgr, out, {cv::IMWRITE_PNG_COMPRESSION, 6, cv::IMWRITE_PNG_STRATEGY, 0});
  return out;
}

inline std::vector<std::uint8_t> encode_jpeg(const Image& img, int quality = 90) {
  cv::Mat bgr;
  cv::cvtColor(as_mat(img), bgr, cv::COLOR_RGB2BGR);
  std::vector<std::uint8_t> out;
  cv::imencode(".jpg", bgr, out, {cv::IMWRITE_JPEG_QUALITY, quality});
  return out;
}

inline std::vector<std::uint8_t> encode_bmp(const Image& img) {
  cv::Mat bgr;
  cv::cvtColor(as_mat(img), bgr, cv::COLOR_RGB2BGR);
  std::vector<std::uint8_t> out;
  cv::imencode(".bmp", bgr, out);
  return out;
}

}  // namespace image
}  // namespace deskvqa
