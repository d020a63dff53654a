#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "deskvqa/data/dataset.hpp"
#include "deskvqa/features/extractors.hpp"
#include "deskvqa/model/artifact.hpp"
#include "deskvqa/train/trainer.hpp"

namespace deskvqa::train {

enum class JobState { queued, preprocessing, extracting_features, training, packaging, done, failed };

inline std::string_view to_string(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::preprocessing: return "preprocessing";
    case JobState::extracting_features: return "extracting_features";
    case JobState::training: return "training";
    case JobState::packaging: return "packaging";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
  }
  return "unknown";
}

inline bool is_terminal(JobState s) { return s == JobState::done || s == JobState::failed; }

struct Band {
  double begin, end;
};

/// Slice of the overall progress bar owned by each phase.
inline Band band_of(JobState s) {
  switch (s) {
    case JobState::queued: return {0.0, 0.0};
    case JobState::preprocessing: return {0.0, 0.1};
    case JobState::extracting_features: return {0.1, 0.2};
    case JobState::training: return {0.2, 0.95};
    case JobState::packaging: return {0.95, 1.0};
    case JobState::done: return {1.0, 1.0};
    case JobState::failed: return {0.0, 1.0};
  }
  return {0.0, 1.0};
}

inline double scale_into(JobState s, double fraction) {
  auto b = band_of(s);
  return b.begin + (b.end - b.begin) * std::clamp(fraction, 0.0, 1.0);
}

struct JobSnapshot {
  std::string job_id;
  JobState state = JobState::queued;
  double progress = 0.0;
  int epoch = 0;
  std::optional<double> latest_loss;
  std::string message;
  std::optional<std::filesystem::path> artifact_path;
};

inline nlohmann::ordered_json to_json(const JobSnapshot& s) {
  nlohmann::ordered_json j{{"job_id", s.job_id},
                           {"state", to_string(s.state)},
                           {"progress", s.progress},
                           {"epoch", s.epoch},
                           {"latest_loss", nullptr},
                           {"message", s.message}};
  if (s.latest_loss) j["latest_loss"] = *s.latest_loss;
  return j;
}

/// Shared job record. The trainer writes, pollers read snapshots; every
/// update keeps state order and progress monotone.
class JobRecord {
 public:
  explicit JobRecord(std::string job_id) { snap_.job_id = std::move(job_id); }

  JobSnapshot snapshot() const {
    std::lock_guard lock(mutex_);
    return snap_;
  }

  std::vector<JobSnapshot> history() const {
    std::lock_guard lock(mutex_);
    return history_;
  }

  /// Moves to a later phase at the start of its band.
  void enter(JobState next, std::string message = {}) {
    std::lock_guard lock(mutex_);
    if (is_terminal(snap_.state) || static_cast<int>(next) <= static_cast<int>(snap_.state)) {
      throw Error(ErrorKind::InvalidConfig,
                  "job cannot move from " + std::string(to_string(snap_.state)) + " to " + std::string(to_string(next)));
    }
    snap_.state = next;
    raise(band_of(next).begin);
    if (!message.empty()) snap_.message = std::move(message);
    history_.push_back(snap_);
  }

  /// Progress within the current phase, fraction in [0,1].
  void advance(double fraction, std::optional<int> epoch = std::nullopt, std::optional<double> loss = std::nullopt) {
    std::lock_guard lock(mutex_);
    if (is_terminal(snap_.state)) return;
    raise(scale_into(snap_.state, fraction));
    if (epoch) snap_.epoch = *epoch;
    if (loss) snap_.latest_loss = *loss;
    history_.push_back(snap_);
  }

  void note(std::string message) {
    std::lock_guard lock(mutex_);
    snap_.message = std::move(message);
  }

  void finish(std::filesystem::path artifact, std::string message) {
    std::lock_guard lock(mutex_);
    if (is_terminal(snap_.state)) return;
    snap_.state = JobState::done;
    snap_.progress = 1.0;
    snap_.artifact_path = std::move(artifact);
    snap_.message = std::move(message);
    history_.push_back(snap_);
  }

  void fail(std::string message) {
    std::lock_guard lock(mutex_);
    if (is_terminal(snap_.state)) return;
    snap_.state = JobState::failed;
    snap_.message = std::move(message);
    history_.push_back(snap_);
  }

 private:
  void raise(double p) { snap_.progress = std::max(snap_.progress, p); }

  mutable std::mutex mutex_;
  JobSnapshot snap_;
  std::vector<JobSnapshot> history_;
};

struct FineTuneRequest {
  data::DatasetPaths dataset;
  features::ExtractorSpec extractor;
  TrainSpec spec;
  std::filesystem::path artifact_path;
  int extraction_workers = 1;
};

/// Runs every phase of a fine-tuning job and records the outcome on `job`.
/// Never throws; failures land in the job as state failed.
inline void run_finetune(const FineTuneRequest& req, JobRecord& job, const std::atomic<bool>* cancel = nullptr,
                         const TrainHooks& extra_hooks = {}) {
  try {
    job.enter(JobState::preprocessing, "loading dataset");
    auto loaded = data::load_dataset(req.dataset);
    if (loaded.entries.empty()) throw Error(ErrorKind::EmptyAnswerSpace, "dataset has no entries");
    job.advance(1.0);

    job.enter(JobState::extracting_features, "extracting region features");
    auto extractor = features::make_extractor(req.extractor);
    features::FeatureStore store(req.dataset.features_dir());
    std::vector<features::ImageSource> sources;
    for (const auto& img : loaded.images) sources.push_back({img.image_id, img.path});
    auto report = features::cache_features(sources, *extractor, store, req.extraction_workers,
                                           [&](std::size_t done, std::size_t total) {
                                             job.advance(static_cast<double>(done) / static_cast<double>(total));
                                           });
    FeatureMap feats;
    for (const auto& src : sources) {
      if (auto rec = store.read_record(src.image_id)) feats.emplace(src.image_id, std::move(rec->regions));
    }
    std::vector<data::QAEntry> usable;
    for (auto& e : loaded.entries) {
      if (feats.contains(e.image_id)) usable.push_back(std::move(e));
    }
    if (usable.empty()) {
      std::string why = report.failed.empty() ? "no features available" : report.failed.front().second;
      throw Error(ErrorKind::ExtractorUnavailable, "no entry has usable features (" + why + ")");
    }
    std::string extraction_note = std::to_string(report.extracted.size()) + " extracted, " +
                                  std::to_string(report.reused.size()) + " reused";
    if (!report.failed.empty()) {
      extraction_note += ", " + std::to_string(report.failed.size()) + " failed and skipped";
    }
    job.advance(1.0);

    job.enter(JobState::training, extraction_note);
    auto spec = req.spec;
    spec.model_config.feature_dim = req.extractor.feature_dim;
    spec.model_config.max_regions = req.extractor.max_regions;
    TrainHooks hooks = extra_hooks;
    hooks.cancel = cancel;
    hooks.on_step = [&](const StepEvent& ev) {
      job.advance(ev.fraction(), ev.epoch, ev.loss);
      if (extra_hooks.on_step) extra_hooks.on_step(ev);
    };
    auto result = fit(usable, feats, spec, hooks, req.extractor);

    job.enter(JobState::packaging, "writing model artifact");
    std::filesystem::create_directories(req.artifact_path.parent_path());
    model::save_model(result.artifact, req.artifact_path);
    job.advance(1.0);

    std::string summary = "trained " + std::to_string(spec.epochs) + " epochs on " + std::to_string(usable.size()) +
                          " questions, " + std::to_string(result.artifact.answers.size()) + " answers";
    job.finish(req.artifact_path, summary);
  } catch (const std::exception& e) {
    job.fail(e.what());
  }
}

}  // namespace deskvqa::train
