#pragma once

// Small learnable desk dataset: each image is a tinted scene whose colour and
// brightness decide the answers to two fixed questions.

#include <array>
#include <string>
#include <vector>

#include "deskvqa/data/dataset.hpp"
#include "deskvqa/features/grid_extractor.hpp"
#include "deskvqa/train/trainer.hpp"
#include "deskvqa/util/csv.hpp"
#include "fixtures.hpp"

namespace synthetic {

struct Scene {
  std::string image_id;
  std::vector<std::uint8_t> png;
  deskvqa::Image image;
};

struct DeskSet {
  std::vector<Scene> scenes;
  std::vector<deskvqa::data::QAEntry> entries;

  std::vector<std::uint8_t> zip() const {
    std::vector<std::pair<std::string, std::vector<std::uint8_t>>> files;
    for (const auto& s : scenes) files.emplace_back("desk/" + s.image_id + ".png", s.png);
    return fixtures::make_zip(files);
  }

  std::string csv(bool with_answers = true) const {
    std::vector<std::string> header = {"image_id", "question"};
    if (with_answers) {
      for (int i = 1; i <= 10; ++i) header.push_back("answer" + std::to_string(i));
    }
    std::vector<deskvqa::csv::Row> rows = {header};
    for (const auto& e : entries) {
      deskvqa::csv::Row r = {e.image_id, e.question};
      if (with_answers) r.insert(r.end(), e.answers.begin(), e.answers.end());
      rows.push_back(std::move(r));
    }
    return deskvqa::csv::format(rows);
  }

  deskvqa::train::FeatureMap features(int max_regions, int feature_dim) const {
    deskvqa::train::FeatureMap out;
    for (const auto& s : scenes) {
      out.emplace(s.image_id, deskvqa::features::extract_grid(s.image, max_regions, feature_dim, s.image_id));
    }
    return out;
  }
};

inline deskvqa::Image scene_image(int index, int w, int h) {
  static const std::array<std::array<int, 3>, 4> palette = {{{220, 40, 40}, {40, 200, 60}, {50, 70, 220}, {230, 210, 40}}};
  const auto& c = palette[index % 4];
  const double level = (index / 4) % 2 == 0 ? 1.0 : 0.35;
  auto img = fixtures::noise(w, h, 1000u + static_cast<std::uint32_t>(index));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      auto* p = img.at(x, y);
      for (int ch = 0; ch < 3; ++ch) p[ch] = static_cast<std::uint8_t>((c[ch] * 0.85 + p[ch] * 0.15) * level);
    }
  }
  return img;
}

/// n_images scenes, two questions each.
inline DeskSet desk_set(int n_images, int w = 48, int h = 40) {
  static const char* colour_names[] = {"red", "green", "blue", "yellow"};
  DeskSet set;
  std::int64_t qid = 1;
  for (int i = 0; i < n_images; ++i) {
    Scene s;
    s.image_id = "desk_" + std::to_string(i);
    s.image = scene_image(i, w, h);
    s.png = deskvqa::image::encode_png(s.image);
    std::vector<std::string> colour(10, colour_names[i % 4]);
    std::vector<std::string> lamp(10, (i / 4) % 2 == 0 ? "yes" : "no");
    set.entries.push_back({qid++, s.image_id, "What color is the mug?", colour});
    set.entries.push_back({qid++, s.image_id, "Is the lamp on?", lamp});
    set.scenes.push_back(std::move(s));
  }
  return set;
}

inline deskvqa::model::ModelConfig tiny_config(deskvqa::model::Architecture arch) {
  deskvqa::model::ModelConfig c;
  c.architecture = arch;
  c.hidden_dim = 32;
  c.n_heads = 2;
  c.feature_dim = 32;
  c.max_question_tokens = 8;
  c.max_regions = 9;
  c.layers = 2;
  c.lang_layers = 1;
  c.vision_layers = 1;
  c.cross_layers = 1;
  c.ffn_multiplier = 2;
  c.dropout = 0.1;
  c.seed = 5;
  return c;
}

inline deskvqa::train::TrainSpec tiny_spec(deskvqa::model::Architecture arch, int epochs = 30) {
  deskvqa::train::TrainSpec s;
  s.model_config = tiny_config(arch);
  s.epochs = epochs;
  s.batch_size = 4;
  s.learning_rate = 1e-3;
  s.seed = 3;
  return s;
}

/// Overfit setup: 20 entries, 30 epochs. Width 128 keeps the image path through
/// attention strong enough to separate hues under the small-std init.
inline deskvqa::train::TrainSpec overfit_spec(deskvqa::model::Architecture arch) {
  auto s = tiny_spec(arch, 30);
  s.model_config.hidden_dim = 128;
  s.model_config.n_heads = 4;
  return s;
}

}  // namespace synthetic
