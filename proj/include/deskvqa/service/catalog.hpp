#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "deskvqa/model/config.hpp"
#include "deskvqa/service/api_error.hpp"
#include "deskvqa/train/trainer.hpp"

namespace deskvqa::service {

struct CatalogEntry {
  std::string_view id;
  std::string_view display_name;
  model::Architecture architecture;
};

inline constexpr std::array<CatalogEntry, 2> kCatalog = {{
    {"visualbert", "VisualBERT (single-stream)", model::Architecture::single_stream},
    {"lxmert", "LXMERT (dual-stream)", model::Architecture::dual_stream},
}};

inline std::optional<CatalogEntry> find_model(std::string_view id) {
  for (const auto& e : kCatalog) {
    if (e.id == id) return e;
  }
  return std::nullopt;
}

inline nlohmann::ordered_json to_json(const train::TrainSpec& s) {
  return {{"epochs", s.epochs},
          {"batch_size", s.batch_size},
          {"learning_rate", s.learning_rate},
          {"seed", s.seed},
          {"min_answer_count", s.min_answer_count},
          {"model", model::to_json(s.model_config)}};
}

/// Default spec for one catalog entry. Vocabulary and answer counts are
/// filled in from the dataset at training time.
inline train::TrainSpec default_spec(const CatalogEntry& entry, const train::TrainSpec& base) {
  auto s = base;
  s.model_config.architecture = entry.architecture;
  return s;
}

inline nlohmann::ordered_json catalog_json(const train::TrainSpec& base) {
  auto out = nlohmann::ordered_json::array();
  for (const auto& e : kCatalog) {
    out.push_back({{"id", e.id},
                   {"name", e.display_name},
                   {"architecture", model::to_string(e.architecture)},
                   {"defaults", to_json(default_spec(e, base))}});
  }
  return out;
}

/// Applies request overrides to a spec. Unknown keys or bad values raise
/// INVALID_REQUEST.
inline void apply_overrides(train::TrainSpec& s, const nlohmann::json& overrides) {
  auto bad = [](const std::string& m) { return ApiError(400, code::invalid_request, m); };
  if (overrides.is_null()) return;
  if (!overrides.is_object()) throw bad("overrides must be an object");
  auto& m = s.model_config;
  try {
    for (const auto& [key, v] : overrides.items()) {
      if (key == "epochs") s.epochs = v.get<int>();
      else if (key == "batch_size") s.batch_size = v.get<int>();
      else if (key == "learning_rate") s.learning_rate = v.get<double>();
      else if (key == "seed") s.seed = v.get<std::uint64_t>();
      else if (key == "min_answer_count") s.min_answer_count = v.get<int>();
      else if (key == "hidden_dim") m.hidden_dim = v.get<int>();
      else if (key == "n_heads") m.n_heads = v.get<int>();
      else if (key == "max_question_tokens") m.max_question_tokens = v.get<int>();
      else if (key == "layers") m.layers = v.get<int>();
      else if (key == "lang_layers") m.lang_layers = v.get<int>();
      else if (key == "vision_layers") m.vision_layers = v.get<int>();
      else if (key == "cross_layers") m.cross_layers = v.get<int>();
      else if (key == "ffn_multiplier") m.ffn_multiplier = v.get<int>();
      else if (key == "dropout") m.dropout = v.get<double>();
      else if (key == "init_seed") m.seed = v.get<std::uint64_t>();
      else throw bad("unknown override '" + key + "'");
    }
  } catch (const nlohmann::json::exception&) {
    throw bad("override values have the wrong type");
  }
  try {
    s.validate();
    auto probe = m;
    probe.vocab_size = 5;
    probe.num_answers = 1;
    probe.validate();
  } catch (const Error& e) {
    throw bad(e.what());
  }
}

}  // namespace deskvqa::service
