#pragma once

// Single-file model artifact:
//   "PGBK" | u32 version | u32 crc32(rest) | sections...
// Each section is  u32 name length | name | u64 payload length | payload.
// Text sections hold compact JSON. The "params" payload is
//   u32 count, then per tensor: u32 name length | name | u32 rows | u32 cols
//   | rows*cols little-endian float32 in row-major order.
// "pretrained" is reserved for externally converted weights and is written
// empty.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "deskvqa/features/region_features.hpp"
#include "deskvqa/model/config.hpp"
#include "deskvqa/model/tokenizer.hpp"
#include "deskvqa/model/transformer.hpp"
#include "deskvqa/util/error.hpp"
#include "deskvqa/util/fs.hpp"
#include "deskvqa/util/zip.hpp"

namespace deskvqa::model {

inline constexpr char kArtifactMagic[4] = {'P', 'G', 'B', 'K'};
inline constexpr std::uint32_t kArtifactVersion = 1;

static_assert(std::endian::native == std::endian::little, "artifact I/O assumes a little-endian host");

struct ModelArtifact {
  VqaModel<float> model;
  Vocab vocab;
  std::vector<std::string> answers;
  std::optional<features::ExtractorSpec> extractor;
};

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    auto p = reinterpret_cast<const std::uint8_t*>(&v);
    out_.insert(out_.end(), p, p + sizeof(T));
  }
  void put_bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  void put_string(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void section(std::string_view name, std::span<const std::uint8_t> payload) {
    put_string(name);
    put(static_cast<std::uint64_t>(payload.size()));
    put_bytes(payload);
  }
  void section(std::string_view name, std::string_view text) {
    section(name, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }
  std::vector<std::uint8_t>& bytes() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::uint8_t> get_bytes(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_string() {
    auto n = get<std::uint32_t>();
    auto b = get_bytes(n);
    return {b.begin(), b.end()};
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw Error(ErrorKind::CorruptArtifact, "artifact truncated");
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline nlohmann::json parse_section(std::span<const std::uint8_t> b, const char* name) {
  auto j = nlohmann::json::parse(b.begin(), b.end(), nullptr, false);
  if (j.is_discarded()) throw Error(ErrorKind::CorruptArtifact, std::string("unreadable section ") + name);
  return j;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_artifact(const ModelArtifact& a) {
  detail::ByteWriter params;
  params.put(static_cast<std::uint32_t>(a.model.params().size()));
  for (const auto& [name, p] : a.model.params()) {
    params.put_string(name);
    params.put(static_cast<std::uint32_t>(p.value.rows()));
    params.put(static_cast<std::uint32_t>(p.value.cols()));
    params.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(p.value.data()), p.value.size() * sizeof(float)));
  }

  detail::ByteWriter body;
  body.section("config", to_json(a.model.config()).dump());
  body.section("vocab", nlohmann::json(a.vocab.tokens()).dump());
  body.section("answers", nlohmann::json(a.answers).dump());
  body.section("extractor", a.extractor ? features::to_json(*a.extractor).dump() : std::string("null"));
  body.section("pretrained", std::string_view{});
  body.section("params", params.bytes());

  detail::ByteWriter file;
  file.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(kArtifactMagic), 4));
  file.put(kArtifactVersion);
  file.put(zip::crc32_of(body.bytes()));
  file.put_bytes(body.bytes());
  return std::move(file.bytes());
}

inline ModelArtifact deserialize_artifact(std::span<const std::uint8_t> data) {
  if (data.size() < 12 || std::memcmp(data.data(), kArtifactMagic, 4) != 0) {
    throw Error(ErrorKind::CorruptArtifact, "not a model artifact");
  }
  detail::ByteReader head(data.subspan(4, 8));
  const auto version = head.get<std::uint32_t>();
  const auto crc = head.get<std::uint32_t>();
  if (version != kArtifactVersion) {
    throw Error(ErrorKind::VersionMismatch, "artifact version " + std::to_string(version) + ", supported " +
                                                std::to_string(kArtifactVersion));
  }
  auto body = data.subspan(12);
  if (zip::crc32_of(body) != crc) throw Error(ErrorKind::CorruptArtifact, "checksum mismatch");

  std::map<std::string, std::span<const std::uint8_t>> sections;
  detail::ByteReader r(body);
  while (!r.done()) {
    auto name = r.get_string();
    auto len = r.get<std::uint64_t>();
    sections[name] = r.get_bytes(static_cast<std::size_t>(len));
  }
  for (const char* required : {"config", "vocab", "answers", "params"}) {
    if (!sections.contains(required)) throw Error(ErrorKind::CorruptArtifact, std::string("missing section ") + required);
  }

  try {
    auto config = model_config_from_json(detail::parse_section(sections["config"], "config"));
    Vocab vocab(detail::parse_section(sections["vocab"], "vocab").get<std::vector<std::string>>());
    auto answers = detail::parse_section(sections["answers"], "answers").get<std::vector<std::string>>();
    std::optional<features::ExtractorSpec> extractor;
    if (sections.contains("extractor")) {
      auto j = detail::parse_section(sections["extractor"], "extractor");
      if (!j.is_null()) extractor = features::extractor_spec_from_json(j);
    }

    nn::ParamStore<float> store;
    detail::ByteReader pr(sections["params"]);
    const auto count = pr.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
      auto name = pr.get_string();
      const auto rows = pr.get<std::uint32_t>();
      const auto cols = pr.get<std::uint32_t>();
      auto raw = pr.get_bytes(static_cast<std::size_t>(rows) * cols * sizeof(float));
      auto& p = store.add(name, rows, cols);
      std::memcpy(p.value.data(), raw.data(), raw.size());
    }
    if (!pr.done()) throw Error(ErrorKind::CorruptArtifact, "trailing bytes in params section");
    if (config.vocab_size != vocab.size() || config.num_answers != static_cast<int>(answers.size())) {
      throw Error(ErrorKind::CorruptArtifact, "config disagrees with vocab or answer list");
    }
    return ModelArtifact{VqaModel<float>(std::move(config), std::move(store)), std::move(vocab), std::move(answers),
                         std::move(extractor)};
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::CorruptArtifact, e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::InvalidConfig) throw Error(ErrorKind::CorruptArtifact, e.what());
    throw;
  }
}

inline void save_model(const ModelArtifact& a, const std::filesystem::path& path) {
  fsutil::write_atomic(path, serialize_artifact(a));
}

inline ModelArtifact load_model(const std::filesystem::path& path) {
  return deserialize_artifact(fsutil::read_bytes(path));
}

}  // namespace deskvqa::model
