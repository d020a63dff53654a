#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "deskvqa/features/region_features.hpp"
#include "deskvqa/util/fs.hpp"
#include "deskvqa/util/hash.hpp"
#include "deskvqa/util/json.hpp"

namespace deskvqa::features {

/// One record on disk: features/<image_id>.feat.
struct CachedRecord {
  std::string content_hash;
  ExtractorSpec extractor;
  RegionFeatures regions;
};

inline nlohmann::ordered_json to_json(const CachedRecord& rec) {
  const auto& rf = rec.regions;
  auto boxes = nlohmann::ordered_json::array();
  for (const auto& b : rf.boxes) boxes.push_back({b[0], b[1], b[2], b[3]});
  auto feats = nlohmann::ordered_json::array();
  for (int r = 0; r < rf.n_regions(); ++r) {
    auto f = rf.feature(r);
    feats.push_back(std::vector<float>(f.begin(), f.end()));
  }
  auto extractor = to_json(rec.extractor);
  extractor.erase("endpoint");
  return {{"image_id", rf.image_id},
          {"content_hash", rec.content_hash},
          {"extractor", std::move(extractor)},
          {"n_regions", rf.n_regions()},
          {"feature_dim", rf.feature_dim},
          {"boxes", std::move(boxes)},
          {"features", std::move(feats)}};
}

inline CachedRecord cached_record_from_json(const nlohmann::json& j) {
  CachedRecord rec;
  rec.content_hash = j.at("content_hash").get<std::string>();
  const auto& ex = j.at("extractor");
  rec.extractor.kind = extractor_kind_from(ex.at("kind").get<std::string>());
  rec.extractor.max_regions = ex.at("max_regions").get<int>();
  rec.extractor.feature_dim = ex.at("feature_dim").get<int>();
  auto& rf = rec.regions;
  rf.image_id = j.at("image_id").get<std::string>();
  rf.feature_dim = j.at("feature_dim").get<int>();
  for (const auto& b : j.at("boxes")) {
    rf.boxes.push_back({b.at(0).get<float>(), b.at(1).get<float>(), b.at(2).get<float>(), b.at(3).get<float>()});
  }
  const auto& feats = j.at("features");
  if (feats.size() != rf.boxes.size() || j.at("n_regions").get<int>() != rf.n_regions()) {
    throw Error(ErrorKind::SchemaViolation, rf.image_id + ": feature record has inconsistent region counts");
  }
  for (const auto& row : feats) {
    if (static_cast<int>(row.size()) != rf.feature_dim) {
      throw Error(ErrorKind::SchemaViolation, rf.image_id + ": feature row has wrong width");
    }
    for (const auto& v : row) rf.features.push_back(v.get<float>());
  }
  return rec;
}

/// Directory of per-image feature records. Writes are serialized; each file
/// is replaced atomically so readers never observe partial records.
class FeatureStore {
 public:
  explicit FeatureStore(std::filesystem::path dir) : dir_(std::move(dir)) { std::filesystem::create_directories(dir_); }

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path path_for(std::string_view image_id) const { return dir_ / (std::string(image_id) + ".feat"); }

  std::optional<CachedRecord> read_record(std::string_view image_id) const {
    auto path = path_for(image_id);
    if (!std::filesystem::exists(path)) return std::nullopt;
    auto doc = nlohmann::json::parse(fsutil::read_text(path), nullptr, false);
    if (doc.is_discarded()) return std::nullopt;
    try {
      return cached_record_from_json(doc);
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }

  RegionFeatures load(std::string_view image_id) const {
    auto rec = read_record(image_id);
    if (!rec) throw Error(ErrorKind::Io, "no cached features for image '" + std::string(image_id) + "'");
    return std::move(rec->regions);
  }

  void write(const CachedRecord& rec) {
    auto text = dump_compact(to_json(rec));
    std::lock_guard lock(write_mutex_);
    fsutil::write_atomic(path_for(rec.regions.image_id), text);
  }

 private:
  std::filesystem::path dir_;
  std::mutex write_mutex_;
};

struct ImageSource {
  std::string image_id;
  std::filesystem::path path;
};

struct CacheReport {
  std::vector<std::string> extracted;
  std::vector<std::string> reused;
  std::vector<std::pair<std::string, std::string>> failed;  // image_id, message
};

inline bool same_extraction(const ExtractorSpec& a, const ExtractorSpec& b) {
  return a.kind == b.kind && a.max_regions == b.max_regions && a.feature_dim == b.feature_dim;
}

/// Extracts features for every image whose content hash (or extractor
/// settings) differ from the stored record. Failures are reported per image.
inline CacheReport cache_features(const std::vector<ImageSource>& images, const Extractor& extractor,
                                  FeatureStore& store, int workers = 1,
                                  const std::function<void(std::size_t, std::size_t)>& on_progress = {}) {
  const std::size_t n = images.size();
  std::vector<int> outcome(n, 0);  // 1 extracted, 2 reused, 3 failed
  std::vector<std::string> messages(n);
  std::atomic<std::size_t> next{0}, done{0};
  std::mutex progress_mutex;

  auto work = [&] {
    for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      const auto& src = images[i];
      try {
        auto bytes = fsutil::read_bytes(src.path);
        auto hash = sha256_hex(bytes);
        auto existing = store.read_record(src.image_id);
        if (existing && existing->content_hash == hash && same_extraction(existing->extractor, extractor.spec())) {
          outcome[i] = 2;
        } else {
          auto rf = extractor.extract(src.image_id, bytes);
          validate(rf, extractor.spec().max_regions);
          store.write({hash, extractor.spec(), std::move(rf)});
          outcome[i] = 1;
        }
      } catch (const std::exception& e) {
        outcome[i] = 3;
        messages[i] = e.what();
      }
      auto finished = done.fetch_add(1) + 1;
      if (on_progress) {
        std::lock_guard lock(progress_mutex);
        on_progress(finished, n);
      }
    }
  };

  const int n_threads = std::max(1, std::min<int>(workers, static_cast<int>(n)));
  if (n_threads == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(work);
  }

  CacheReport report;
  for (std::size_t i = 0; i < n; ++i) {
    if (outcome[i] == 1) report.extracted.push_back(images[i].image_id);
    if (outcome[i] == 2) report.reused.push_back(images[i].image_id);
    if (outcome[i] == 3) report.failed.emplace_back(images[i].image_id, messages[i]);
  }
  return report;
}

}  // namespace deskvqa::features
