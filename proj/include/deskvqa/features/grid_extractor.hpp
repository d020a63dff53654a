#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <array>
#include <span>
#include <string>
#include <vector>

#include "deskvqa/features/region_features.hpp"
#include "deskvqa/util/image.hpp"

namespace deskvqa::features {

namespace grid_detail {

// Per-cell appearance statistics ahead of the projected tail of the feature
// vector. Position is left to the box coordinates.
//   [0..3)   channel means in [0,1]
//   [3..6)   channel standard deviations
//   [6..8)   mean |dx|, |dy| of luminance
//   [8..16)  hue histogram, 8 bins, weighted by saturation
//   [16..20) luminance histogram, 4 bins
//   [20..23) mean chromaticity r, g, b (each channel over the channel sum)
//   [23..26) mean saturation, dark fraction, bright fraction
inline constexpr int kBaseDim = 26;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Fixed projection weight in [-1, 1), identical on every platform.
inline float projection_weight(int out, int in) {
  auto bits = splitmix64((static_cast<std::uint64_t>(out) << 32) | static_cast<std::uint32_t>(in));
  return static_cast<float>(static_cast<double>(bits >> 40) / static_cast<double>(1ull << 24) * 2.0 - 1.0);
}

inline std::array<double, kBaseDim> cell_statistics(const Image& img, int x0, int x1, int y0, int y1) {
  std::array<double, kBaseDim> base{};
  const double n = static_cast<double>(x1 - x0) * (y1 - y0);
  double sum[3] = {0, 0, 0}, sq[3] = {0, 0, 0};
  double grad_x = 0, grad_y = 0;
  auto luma = [&](int x, int y) {
    const auto* p = img.at(x, y);
    return (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) / 255.0;
  };
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      const auto* p = img.at(x, y);
      double rgb[3];
      for (int c = 0; c < 3; ++c) {
        rgb[c] = p[c] / 255.0;
        sum[c] += rgb[c];
        sq[c] += rgb[c] * rgb[c];
      }
      const double l = luma(x, y);
      if (x + 1 < x1) grad_x += std::abs(luma(x + 1, y) - l);
      if (y + 1 < y1) grad_y += std::abs(luma(x, y + 1) - l);

      const double hi = std::max({rgb[0], rgb[1], rgb[2]}), lo = std::min({rgb[0], rgb[1], rgb[2]});
      const double chroma = hi - lo;
      const double sat = hi > 0 ? chroma / hi : 0.0;
      if (chroma > 0) {
        double h;  // in [0, 6)
        if (hi == rgb[0]) {
          h = std::fmod((rgb[1] - rgb[2]) / chroma + 6.0, 6.0);
        } else if (hi == rgb[1]) {
          h = (rgb[2] - rgb[0]) / chroma + 2.0;
        } else {
          h = (rgb[0] - rgb[1]) / chroma + 4.0;
        }
        base[8 + std::min(7, static_cast<int>(h / 6.0 * 8.0))] += sat;
      }
      base[16 + std::min(3, static_cast<int>(l * 4.0))] += 1.0;
      const double total = rgb[0] + rgb[1] + rgb[2];
      for (int c = 0; c < 3; ++c) base[20 + c] += total > 0 ? rgb[c] / total : 1.0 / 3.0;
      base[23] += sat;
      base[24] += l < 0.2;
      base[25] += l > 0.8;
    }
  }
  for (int c = 0; c < 3; ++c) {
    double mean = sum[c] / n;
    base[c] = mean;
    base[3 + c] = std::sqrt(std::max(0.0, sq[c] / n - mean * mean));
  }
  base[6] = grad_x / n;
  base[7] = grad_y / n;
  for (int d = 8; d < kBaseDim; ++d) base[d] /= n;
  return base;
}

}  // namespace grid_detail

inline int grid_side(int max_regions) {
  int k = static_cast<int>(std::floor(std::sqrt(static_cast<double>(std::max(1, max_regions)))));
  while ((k + 1) * (k + 1) <= max_regions) ++k;
  while (k > 1 && k * k > max_regions) --k;
  return std::max(1, k);
}

/// Splits the image into a k x k grid, k = floor(sqrt(max_regions)), one
/// region per cell in row-major order. Each feature vector starts with the
/// cell statistics above; the remaining entries are tanh of a fixed
/// projection of those statistics. Pure function of its arguments.
inline RegionFeatures extract_grid(const Image& img, int max_regions, int feature_dim, std::string image_id = {}) {
  if (img.width < 1 || img.height < 1) throw Error(ErrorKind::UnreadableImage, "empty image");
  if (feature_dim < 1) throw Error(ErrorKind::InvalidConfig, "feature_dim must be >= 1");
  using namespace grid_detail;
  const int k = grid_side(max_regions);
  RegionFeatures rf;
  rf.image_id = std::move(image_id);
  rf.feature_dim = feature_dim;
  rf.boxes.reserve(static_cast<std::size_t>(k) * k);
  rf.features.resize(static_cast<std::size_t>(k) * k * feature_dim);

  auto edge = [k](int i, int extent) { return static_cast<int>(static_cast<long long>(i) * extent / k); };
  for (int gy = 0; gy < k; ++gy) {
    for (int gx = 0; gx < k; ++gx) {
      int x0 = std::min(edge(gx, img.width), img.width - 1);
      int x1 = std::max(x0 + 1, edge(gx + 1, img.width));
      int y0 = std::min(edge(gy, img.height), img.height - 1);
      int y1 = std::max(y0 + 1, edge(gy + 1, img.height));
      Box box{static_cast<float>(gx) / k, static_cast<float>(gy) / k, static_cast<float>(gx + 1) / k,
              static_cast<float>(gy + 1) / k};
      auto base = cell_statistics(img, x0, x1, y0, y1);

      float* out = rf.features.data() + static_cast<std::size_t>(rf.boxes.size()) * feature_dim;
      const int direct = std::min(feature_dim, kBaseDim);
      for (int d = 0; d < direct; ++d) out[d] = static_cast<float>(base[d]);
      for (int d = kBaseDim; d < feature_dim; ++d) {
        double acc = 0.0;
        for (int i = 0; i < kBaseDim; ++i) acc += projection_weight(d, i) * base[i];
        out[d] = static_cast<float>(std::tanh(acc));
      }
      rf.boxes.push_back(box);
    }
  }
  return rf;
}

class GridExtractor final : public Extractor {
 public:
  explicit GridExtractor(ExtractorSpec spec) : spec_(std::move(spec)) { spec_.kind = ExtractorKind::builtin_grid; }

  RegionFeatures extract(std::string_view image_id, std::span<const std::uint8_t> bytes) const override {
    return extract_grid(image::decode(bytes), spec_.max_regions, spec_.feature_dim, std::string(image_id));
  }

  const ExtractorSpec& spec() const override { return spec_; }

 private:
  ExtractorSpec spec_;
};

}  // namespace deskvqa::features
