#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "deskvqa/features/region_features.hpp"
#include "deskvqa/train/trainer.hpp"
#include "deskvqa/util/error.hpp"
#include "deskvqa/util/fs.hpp"

namespace deskvqa::service {

struct ServiceConfig {
  std::filesystem::path data_dir = "deskvqa-data";
  std::string host = "0.0.0.0";
  int port = 8080;
  features::ExtractorSpec extractor;
  std::size_t max_zip_bytes = std::size_t{512} << 20;
  std::size_t max_csv_bytes = std::size_t{10} << 20;
  train::TrainSpec default_train;
  std::filesystem::path sample_dir;  // bundled sample image and questions
  std::filesystem::path static_dir;  // built web front-end, optional
  int extraction_workers = 1;

  std::filesystem::path datasets_dir() const { return data_dir / "datasets"; }
  std::filesystem::path models_dir() const { return data_dir / "models"; }
  std::filesystem::path public_dir() const { return data_dir / "public"; }

  void validate() const {
    extractor.validate();
    default_train.validate();
    if (port < 0 || port > 65535) throw Error(ErrorKind::InvalidConfig, "port out of range");
    if (max_zip_bytes == 0 || max_csv_bytes == 0) throw Error(ErrorKind::InvalidConfig, "upload caps must be positive");
    if (extraction_workers < 1) throw Error(ErrorKind::InvalidConfig, "extraction_workers must be >= 1");
  }
};

namespace detail {

inline std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

inline long long parse_integer(const std::string& s, const char* what) {
  try {
    std::size_t used = 0;
    long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::InvalidConfig, std::string(what) + " must be an integer, got '" + s + "'");
  }
}

inline double parse_real(const std::string& s, const char* what) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::InvalidConfig, std::string(what) + " must be a number, got '" + s + "'");
  }
}

}  // namespace detail

/// Applies keys from a JSON config document. Unknown keys are rejected so
/// typos do not pass silently.
inline void apply_config_document(ServiceConfig& c, const nlohmann::json& doc) {
  if (!doc.is_object()) throw Error(ErrorKind::InvalidConfig, "config file must hold a JSON object");
  try {
    for (const auto& [key, value] : doc.items()) {
      if (key == "data_dir") c.data_dir = value.get<std::string>();
      else if (key == "host") c.host = value.get<std::string>();
      else if (key == "port") c.port = value.get<int>();
      else if (key == "extractor") c.extractor.kind = features::extractor_kind_from(value.get<std::string>());
      else if (key == "extractor_endpoint") c.extractor.endpoint = value.get<std::string>();
      else if (key == "max_regions") c.extractor.max_regions = value.get<int>();
      else if (key == "feature_dim") c.extractor.feature_dim = value.get<int>();
      else if (key == "max_zip_mb") c.max_zip_bytes = value.get<std::size_t>() << 20;
      else if (key == "max_csv_mb") c.max_csv_bytes = value.get<std::size_t>() << 20;
      else if (key == "epochs") c.default_train.epochs = value.get<int>();
      else if (key == "batch_size") c.default_train.batch_size = value.get<int>();
      else if (key == "learning_rate") c.default_train.learning_rate = value.get<double>();
      else if (key == "seed") c.default_train.seed = value.get<std::uint64_t>();
      else if (key == "sample_dir") c.sample_dir = value.get<std::string>();
      else if (key == "static_dir") c.static_dir = value.get<std::string>();
      else if (key == "extraction_workers") c.extraction_workers = value.get<int>();
      else throw Error(ErrorKind::InvalidConfig, "unknown config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("config value has the wrong type: ") + e.what());
  }
}

/// DESKVQA_* environment variables override file and built-in defaults.
inline void apply_environment(ServiceConfig& c) {
  using detail::env;
  if (auto v = env("DESKVQA_DATA_DIR")) c.data_dir = *v;
  if (auto v = env("DESKVQA_HOST")) c.host = *v;
  if (auto v = env("DESKVQA_PORT")) c.port = static_cast<int>(detail::parse_integer(*v, "DESKVQA_PORT"));
  if (auto v = env("DESKVQA_EXTRACTOR")) c.extractor.kind = features::extractor_kind_from(*v);
  if (auto v = env("DESKVQA_EXTRACTOR_ENDPOINT")) c.extractor.endpoint = *v;
  if (auto v = env("DESKVQA_MAX_REGIONS")) {
    c.extractor.max_regions = static_cast<int>(detail::parse_integer(*v, "DESKVQA_MAX_REGIONS"));
  }
  if (auto v = env("DESKVQA_FEATURE_DIM")) {
    c.extractor.feature_dim = static_cast<int>(detail::parse_integer(*v, "DESKVQA_FEATURE_DIM"));
  }
  if (auto v = env("DESKVQA_MAX_ZIP_MB")) {
    c.max_zip_bytes = static_cast<std::size_t>(detail::parse_integer(*v, "DESKVQA_MAX_ZIP_MB")) << 20;
  }
  if (auto v = env("DESKVQA_MAX_CSV_MB")) {
    c.max_csv_bytes = static_cast<std::size_t>(detail::parse_integer(*v, "DESKVQA_MAX_CSV_MB")) << 20;
  }
  if (auto v = env("DESKVQA_EPOCHS")) c.default_train.epochs = static_cast<int>(detail::parse_integer(*v, "DESKVQA_EPOCHS"));
  if (auto v = env("DESKVQA_BATCH_SIZE")) {
    c.default_train.batch_size = static_cast<int>(detail::parse_integer(*v, "DESKVQA_BATCH_SIZE"));
  }
  if (auto v = env("DESKVQA_LEARNING_RATE")) c.default_train.learning_rate = detail::parse_real(*v, "DESKVQA_LEARNING_RATE");
  if (auto v = env("DESKVQA_SEED")) {
    c.default_train.seed = static_cast<std::uint64_t>(detail::parse_integer(*v, "DESKVQA_SEED"));
  }
  if (auto v = env("DESKVQA_SAMPLE_DIR")) c.sample_dir = *v;
  if (auto v = env("DESKVQA_STATIC_DIR")) c.static_dir = *v;
}

/// Built-in defaults, then the optional config file, then the environment.
inline ServiceConfig load_config(const std::optional<std::filesystem::path>& file = std::nullopt) {
  ServiceConfig c;
  if (file) {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(fsutil::read_text(*file));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::InvalidConfig, "config file " + file->string() + " is not valid JSON: " + e.what());
    }
    apply_config_document(c, doc);
  }
  apply_environment(c);
  return c;
}

}  // namespace deskvqa::service
