#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "deskvqa/data/dataset.hpp"
#include "deskvqa/features/region_features.hpp"
#include "deskvqa/model/artifact.hpp"
#include "deskvqa/model/transformer.hpp"
#include "deskvqa/train/answer_space.hpp"

namespace deskvqa::train {

struct TrainSpec {
  model::ModelConfig model_config;
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 5e-4;
  std::uint64_t seed = 0;
  int min_answer_count = 1;

  void validate() const {
    if (epochs < 1) throw Error(ErrorKind::InvalidConfig, "epochs must be >= 1");
    if (batch_size < 1) throw Error(ErrorKind::InvalidConfig, "batch_size must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw Error(ErrorKind::InvalidConfig, "learning_rate must be positive");
    }
    if (min_answer_count < 1) throw Error(ErrorKind::InvalidConfig, "min_answer_count must be >= 1");
  }
};

/// Adam with bias correction.
template <class S>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(nn::ParamStore<S>& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_), c2 = 1.0 - std::pow(beta2_, t_);
    const S step_size = static_cast<S>(lr_ / c1);
    const S b1 = static_cast<S>(beta1_), b2 = static_cast<S>(beta2_);
    const S inv_c2 = static_cast<S>(1.0 / c2), eps = static_cast<S>(eps_);
    for (auto& [name, p] : params) {
      auto& st = state_[name];
      if (st.m.size() == 0) {
        st.m.setZero(p.value.rows(), p.value.cols());
        st.v.setZero(p.value.rows(), p.value.cols());
      }
      st.m.array() = b1 * st.m.array() + (S(1) - b1) * p.grad.array();
      st.v.array() = b2 * st.v.array() + (S(1) - b2) * p.grad.array().square();
      p.value.array() -= step_size * st.m.array() / ((st.v.array() * inv_c2).sqrt() + eps);
    }
  }

  int steps() const { return t_; }

 private:
  struct Moments {
    nn::Matrix<S> m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::map<std::string, Moments> state_;
};

struct StepEvent {
  int epoch = 0;  // 1-based
  std::size_t step = 0;  // completed optimizer steps
  std::size_t total_steps = 0;
  double loss = 0.0;  // mean loss of the batch just applied
  bool epoch_finished = false;

  double fraction() const { return total_steps == 0 ? 1.0 : static_cast<double>(step) / total_steps; }
};

struct TrainHooks {
  std::function<void(const StepEvent&)> on_step;
  const std::atomic<bool>* cancel = nullptr;
  /// Sees each batch loss before the divergence check; tests use it to
  /// inject non-finite values.
  std::function<double(std::size_t step, double loss)> inspect_loss;
};

struct TrainResult {
  model::ModelArtifact artifact;
  std::vector<double> epoch_losses;  // mean example loss per epoch
  std::size_t steps = 0;
};

using FeatureMap = std::map<std::string, features::RegionFeatures, std::less<>>;

struct Encoded {
  std::vector<int> ids;
  const features::RegionFeatures* regions = nullptr;
  nn::Matrix<float> targets;
};

inline std::vector<Encoded> encode_examples(std::span<const data::QAEntry> entries, const FeatureMap& features,
                                            const model::Vocab& vocab, const AnswerSpace& space, int max_tokens) {
  std::vector<Encoded> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    auto it = features.find(e.image_id);
    if (it == features.end()) throw Error(ErrorKind::Io, "no features for image '" + e.image_id + "'");
    Encoded x;
    x.ids = model::tokenize(e.question, vocab, max_tokens);
    x.regions = &it->second;
    auto t = make_targets(e, space);
    x.targets.resize(1, static_cast<Eigen::Index>(t.size()));
    for (std::size_t i = 0; i < t.size(); ++i) x.targets(0, static_cast<Eigen::Index>(i)) = static_cast<float>(t[i]);
    out.push_back(std::move(x));
  }
  return out;
}

/// Fine-tunes a freshly initialized model on the entries. Vocabulary and
/// answer space come from the same entries. Shuffling and dropout draw from
/// TrainSpec::seed; parameter initialization uses model_config.seed.
inline TrainResult fit(std::span<const data::QAEntry> entries, const FeatureMap& features, const TrainSpec& spec,
                       const TrainHooks& hooks = {}, std::optional<features::ExtractorSpec> extractor = std::nullopt) {
  spec.validate();
  auto space = build_answer_space(entries, spec.min_answer_count);
  std::vector<std::string> questions;
  questions.reserve(entries.size());
  for (const auto& e : entries) questions.push_back(e.question);
  auto vocab = model::Vocab::build(questions);

  auto config = spec.model_config;
  config.vocab_size = vocab.size();
  config.num_answers = space.size();
  model::VqaModel<float> net(config);
  auto examples = encode_examples(entries, features, vocab, space, config.max_question_tokens);

  const std::size_t n = examples.size();
  const std::size_t batch = static_cast<std::size_t>(spec.batch_size);
  const std::size_t per_epoch = (n + batch - 1) / batch;
  const std::size_t total = per_epoch * static_cast<std::size_t>(spec.epochs);

  std::mt19937_64 shuffle_rng(spec.seed);
  std::mt19937_64 dropout_rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  Adam<float> adam(spec.learning_rate);
  std::vector<std::size_t> order(n);
  TrainResult result{model::ModelArtifact{std::move(net), std::move(vocab), space.labels, extractor}, {}, 0};
  auto& model = result.artifact.model;

  for (int epoch = 1; epoch <= spec.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      if (hooks.cancel && hooks.cancel->load()) throw Error(ErrorKind::Interrupted, "training cancelled");
      const std::size_t end = std::min(n, start + batch);
      model.params().zero_grad();
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& x = examples[order[i]];
        batch_loss += model.loss(x.ids, *x.regions, x.targets, &dropout_rng, true);
      }
      const double count = static_cast<double>(end - start);
      batch_loss /= count;
      if (hooks.inspect_loss) batch_loss = hooks.inspect_loss(result.steps, batch_loss);
      if (!std::isfinite(batch_loss)) {
        throw Error(ErrorKind::Diverged, "loss became non-finite at epoch " + std::to_string(epoch));
      }
      for (auto& [_, p] : model.params()) p.grad /= static_cast<float>(count);
      adam.step(model.params());
      ++result.steps;
      epoch_loss += batch_loss * count;
      if (hooks.on_step) hooks.on_step({epoch, result.steps, total, batch_loss, end == n});
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(n));
  }
  return result;
}

}  // namespace deskvqa::train
