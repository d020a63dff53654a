#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <string_view>

#include <json.hpp>

#include "deskvqa/util/error.hpp"

namespace deskvqa::model {

enum class Architecture { single_stream, dual_stream };

inline std::string_view to_string(Architecture a) {
  return a == Architecture::single_stream ? "single_stream" : "dual_stream";
}

inline std::ostream& operator<<(std::ostream& os, Architecture a) { return os << to_string(a); }

inline Architecture architecture_from(std::string_view s) {
  if (s == "single_stream") return Architecture::single_stream;
  if (s == "dual_stream") return Architecture::dual_stream;
  throw Error(ErrorKind::InvalidConfig, "unknown architecture '" + std::string(s) + "'");
}

struct ModelConfig {
  Architecture architecture = Architecture::single_stream;
  int hidden_dim = 128;
  int n_heads = 4;
  int feature_dim = 2048;
  int max_question_tokens = 20;
  int max_regions = 36;
  int vocab_size = 0;
  int num_answers = 0;
  int layers = 4;  // single_stream depth
  int lang_layers = 2;
  int vision_layers = 2;
  int cross_layers = 2;
  int ffn_multiplier = 4;
  double dropout = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorKind::InvalidConfig, m); };
    if (hidden_dim < 1 || n_heads < 1) fail("hidden_dim and n_heads must be positive");
    if (hidden_dim % n_heads != 0) fail("hidden_dim must be divisible by n_heads");
    if (feature_dim < 1) fail("feature_dim must be positive");
    if (max_question_tokens < 1) fail("max_question_tokens must be positive");
    if (max_regions < 1) fail("max_regions must be positive");
    if (vocab_size < 5) fail("vocab_size must cover the special tokens and at least one word");
    if (num_answers < 1) fail("num_answers must be positive");
    if (ffn_multiplier < 1) fail("ffn_multiplier must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
    if (architecture == Architecture::single_stream) {
      if (layers < 1) fail("single_stream depth must be >= 1");
    } else if (lang_layers < 1 || vision_layers < 1 || cross_layers < 1) {
      fail("dual_stream depths must all be >= 1");
    }
  }

  int head_dim() const { return hidden_dim / n_heads; }

  bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j{{"architecture", to_string(c.architecture)},
                           {"hidden_dim", c.hidden_dim},
                           {"n_heads", c.n_heads},
                           {"feature_dim", c.feature_dim},
                           {"max_question_tokens", c.max_question_tokens},
                           {"max_regions", c.max_regions},
                           {"vocab_size", c.vocab_size},
                           {"num_answers", c.num_answers},
                           {"ffn_multiplier", c.ffn_multiplier},
                           {"dropout", c.dropout},
                           {"seed", c.seed}};
  if (c.architecture == Architecture::single_stream) {
    j["layers"] = c.layers;
  } else {
    j["layers"] = {c.lang_layers, c.vision_layers, c.cross_layers};
  }
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.architecture = architecture_from(j.at("architecture").get<std::string>());
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.max_question_tokens = j.at("max_question_tokens").get<int>();
  c.max_regions = j.at("max_regions").get<int>();
  c.vocab_size = j.value("vocab_size", 0);
  c.num_answers = j.value("num_answers", 0);
  c.ffn_multiplier = j.value("ffn_multiplier", 4);
  c.dropout = j.value("dropout", 0.1);
  c.seed = j.value("seed", std::uint64_t{0});
  const auto& layers = j.at("layers");
  if (c.architecture == Architecture::single_stream) {
    c.layers = layers.get<int>();
  } else {
    c.lang_layers = layers.at(0).get<int>();
    c.vision_layers = layers.at(1).get<int>();
    c.cross_layers = layers.at(2).get<int>();
  }
  return c;
}

}  // namespace deskvqa::model
