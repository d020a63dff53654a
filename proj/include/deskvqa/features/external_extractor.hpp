#pragma once

#include <cmath>
#include <string>
#include <string_view>

#include <json.hpp>

#include "deskvqa/features/region_features.hpp"
#include "deskvqa/util/http.hpp"

namespace deskvqa::features {

/// Splits "http://host:port/prefix" into the client base and the request path
/// ending in /extract.
inline std::pair<std::string, std::string> split_endpoint(std::string_view endpoint) {
  auto scheme = endpoint.find("://");
  std::size_t host_start = scheme == std::string_view::npos ? 0 : scheme + 3;
  auto slash = endpoint.find('/', host_start);
  std::string base(endpoint.substr(0, slash));
  std::string path = slash == std::string_view::npos ? std::string() : std::string(endpoint.substr(slash));
  while (!path.empty() && path.back() == '/') path.pop_back();
  if (!path.ends_with("/extract")) path += "/extract";
  return {base, path};
}

/// Validates and normalizes an extractor response document. Regions beyond
/// max_regions are dropped in provider order before validation.
inline RegionFeatures parse_extractor_response(const nlohmann::json& doc, std::string_view image_id,
                                               int max_regions, int feature_dim) {
  auto violation = [&](const std::string& what) {
    return Error(ErrorKind::SchemaViolation, std::string(image_id) + ": " + what);
  };
  if (!doc.is_object() || !doc.contains("image") || !doc.contains("regions")) {
    throw violation("response must contain 'image' and 'regions'");
  }
  const auto& image = doc["image"];
  if (!image.is_object() || !image.contains("width") || !image.contains("height") ||
      !image["width"].is_number() || !image["height"].is_number()) {
    throw violation("image.width and image.height are required");
  }
  double width = image["width"].get<double>();
  double height = image["height"].get<double>();
  if (!(width > 0) || !(height > 0)) throw violation("image dimensions must be positive");
  const auto& regions = doc["regions"];
  if (!regions.is_array() || regions.empty()) throw violation("regions must be a non-empty array");

  RegionFeatures rf;
  rf.image_id = std::string(image_id);
  rf.feature_dim = feature_dim;
  const std::size_t keep = std::min<std::size_t>(regions.size(), static_cast<std::size_t>(max_regions));
  rf.features.reserve(keep * feature_dim);
  for (std::size_t r = 0; r < keep; ++r) {
    const auto& reg = regions[r];
    if (!reg.is_object() || !reg.contains("box") || !reg.contains("feature")) {
      throw violation("region " + std::to_string(r) + " lacks box or feature");
    }
    const auto& box = reg["box"];
    const auto& feat = reg["feature"];
    if (!box.is_array() || box.size() != 4) throw violation("region " + std::to_string(r) + " box must have 4 values");
    if (!feat.is_array() || static_cast<int>(feat.size()) != feature_dim) {
      throw violation("region " + std::to_string(r) + " feature must have " + std::to_string(feature_dim) + " values");
    }
    double px[4];
    for (int i = 0; i < 4; ++i) {
      if (!box[i].is_number()) throw violation("non-numeric box value");
      px[i] = box[i].get<double>();
      if (!std::isfinite(px[i])) throw violation("non-finite box value");
    }
    if (!(px[0] >= 0 && px[0] < px[2] && px[2] <= width && px[1] >= 0 && px[1] < px[3] && px[3] <= height)) {
      throw violation("region " + std::to_string(r) + " box is empty or outside the image");
    }
    Box nb{static_cast<float>(px[0] / width), static_cast<float>(px[1] / height), static_cast<float>(px[2] / width),
           static_cast<float>(px[3] / height)};
    if (!box_is_valid(nb)) throw violation("region " + std::to_string(r) + " box degenerates after normalization");
    rf.boxes.push_back(nb);
    for (const auto& v : feat) {
      if (!v.is_number()) throw violation("non-numeric feature value");
      double d = v.get<double>();
      if (!std::isfinite(d) || !std::isfinite(static_cast<float>(d))) throw violation("non-finite feature value");
      rf.features.push_back(static_cast<float>(d));
    }
  }
  validate(rf, max_regions);
  return rf;
}

/// Client for a remote region detector:
///   POST <endpoint>/extract, body = raw image bytes,
///   headers X-Max-Regions and X-Feature-Dim,
///   response {image: {width, height}, regions: [{box: [x1,y1,x2,y2] pixels, feature: [D]}]}.
class ExternalExtractor final : public Extractor {
 public:
  explicit ExternalExtractor(ExtractorSpec spec, int timeout_seconds = 120)
      : spec_(std::move(spec)), timeout_seconds_(timeout_seconds) {
    spec_.kind = ExtractorKind::external;
    spec_.validate();
  }

  RegionFeatures extract(std::string_view image_id, std::span<const std::uint8_t> bytes) const override {
    auto [base, path] = split_endpoint(spec_.endpoint);
    httplib::Client client(base);
    client.set_connection_timeout(10);
    client.set_read_timeout(timeout_seconds_);
    httplib::Headers headers{{"X-Max-Regions", std::to_string(spec_.max_regions)},
                             {"X-Feature-Dim", std::to_string(spec_.feature_dim)},
                             {"X-Image-Id", std::string(image_id)}};
    auto res = client.Post(path, headers, reinterpret_cast<const char*>(bytes.data()), bytes.size(),
                           "application/octet-stream");
    if (!res) {
      throw Error(ErrorKind::ExtractorUnavailable,
                  spec_.endpoint + " unreachable: " + httplib::to_string(res.error()));
    }
    if (res->status >= 500) {
      throw Error(ErrorKind::ExtractorUnavailable, spec_.endpoint + " returned HTTP " + std::to_string(res->status));
    }
    if (res->status != 200) {
      throw Error(ErrorKind::SchemaViolation, spec_.endpoint + " returned HTTP " + std::to_string(res->status));
    }
    nlohmann::json doc = nlohmann::json::parse(res->body, nullptr, false);
    if (doc.is_discarded()) throw Error(ErrorKind::SchemaViolation, "extractor response is not valid JSON");
    return parse_extractor_response(doc, image_id, spec_.max_regions, spec_.feature_dim);
  }

  const ExtractorSpec& spec() const override { return spec_; }

 private:
  ExtractorSpec spec_;
  int timeout_seconds_;
};

}  // namespace deskvqa::features
