#pragma once

// Shared helpers for building synthetic uploads in tests.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "deskvqa/util/image.hpp"
#include "deskvqa/util/zip.hpp"

namespace fixtures {

inline deskvqa::Image solid(int w, int h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  deskvqa::Image img(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      auto* p = img.at(x, y);
      p[0] = r;
      p[1] = g;
      p[2] = b;
    }
  }
  return img;
}

inline deskvqa::Image noise(int w, int h, std::uint32_t seed) {
  deskvqa::Image img(w, h);
  std::mt19937 rng(seed);
  for (auto& v : img.rgb) v = static_cast<std::uint8_t>(rng() & 0xff);
  return img;
}

inline std::vector<std::uint8_t> png(int w, int h, std::uint8_t shade = 128) {
  return deskvqa::image::encode_png(solid(w, h, shade, shade, shade));
}

inline std::vector<std::uint8_t> make_zip(const std::vector<std::pair<std::string, std::vector<std::uint8_t>>>& files) {
  deskvqa::zip::Writer w;
  for (const auto& [name, bytes] : files) w.add(name, bytes);
  return std::move(w).finish();
}

inline std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace fixtures
