#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "deskvqa/util/error.hpp"

namespace deskvqa::features {

/// Normalized (x1, y1, x2, y2) with 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1.
using Box = std::array<float, 4>;

struct RegionFeatures {
  std::string image_id;
  int feature_dim = 0;
  std::vector<Box> boxes;
  std::vector<float> features;  // n_regions x feature_dim, row-major

  int n_regions() const { return static_cast<int>(boxes.size()); }

  std::span<const float> feature(int region) const {
    return {features.data() + static_cast<std::size_t>(region) * feature_dim, static_cast<std::size_t>(feature_dim)};
  }

  bool operator==(const RegionFeatures&) const = default;
};

inline bool box_is_valid(const Box& b) {
  for (float v : b) {
    if (!std::isfinite(v)) return false;
  }
  return b[0] >= 0.0f && b[0] < b[2] && b[2] <= 1.0f && b[1] >= 0.0f && b[1] < b[3] && b[3] <= 1.0f;
}

/// Throws SchemaViolation when any region invariant is broken.
inline void validate(const RegionFeatures& rf, int max_regions) {
  if (rf.n_regions() < 1 || rf.n_regions() > max_regions) {
    throw Error(ErrorKind::SchemaViolation,
                rf.image_id + ": region count " + std::to_string(rf.n_regions()) + " outside [1, " +
                    std::to_string(max_regions) + "]");
  }
  if (rf.features.size() != static_cast<std::size_t>(rf.n_regions()) * rf.feature_dim) {
    throw Error(ErrorKind::SchemaViolation, rf.image_id + ": feature array has wrong size");
  }
  for (const auto& b : rf.boxes) {
    if (!box_is_valid(b)) throw Error(ErrorKind::SchemaViolation, rf.image_id + ": box outside the unit square");
  }
  for (float v : rf.features) {
    if (!std::isfinite(v)) throw Error(ErrorKind::SchemaViolation, rf.image_id + ": non-finite feature value");
  }
}

enum class ExtractorKind { builtin_grid, external };

struct ExtractorSpec {
  ExtractorKind kind = ExtractorKind::builtin_grid;
  std::string endpoint;
  int max_regions = 36;
  int feature_dim = 2048;

  void validate() const {
    if (kind == ExtractorKind::external && endpoint.empty()) {
      throw Error(ErrorKind::InvalidConfig, "external extractor requires an endpoint");
    }
    if (max_regions < 1) throw Error(ErrorKind::InvalidConfig, "max_regions must be >= 1");
    if (feature_dim < 1) throw Error(ErrorKind::InvalidConfig, "feature_dim must be >= 1");
  }

  bool operator==(const ExtractorSpec&) const = default;
};

inline std::string_view to_string(ExtractorKind k) {
  return k == ExtractorKind::external ? "external" : "builtin_grid";
}

inline ExtractorKind extractor_kind_from(std::string_view s) {
  if (s == "builtin_grid" || s == "grid" || s == "builtin") return ExtractorKind::builtin_grid;
  if (s == "external") return ExtractorKind::external;
  throw Error(ErrorKind::InvalidConfig, "unknown extractor kind '" + std::string(s) + "'");
}

inline nlohmann::ordered_json to_json(const ExtractorSpec& s) {
  return {{"kind", to_string(s.kind)},
          {"endpoint", s.endpoint},
          {"max_regions", s.max_regions},
          {"feature_dim", s.feature_dim}};
}

inline ExtractorSpec extractor_spec_from_json(const nlohmann::json& j) {
  ExtractorSpec s;
  s.kind = extractor_kind_from(j.at("kind").get<std::string>());
  s.endpoint = j.value("endpoint", std::string());
  s.max_regions = j.at("max_regions").get<int>();
  s.feature_dim = j.at("feature_dim").get<int>();
  return s;
}

/// Turns raw image bytes into region features. Implementations must be safe
/// to call from several threads at once.
class Extractor {
 public:
  virtual ~Extractor() = default;
  virtual RegionFeatures extract(std::string_view image_id, std::span<const std::uint8_t> image_bytes) const = 0;
  virtual const ExtractorSpec& spec() const = 0;
};

}  // namespace deskvqa::features
