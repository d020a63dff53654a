#pragma once

#include <atomic>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "deskvqa/train/job.hpp"

namespace deskvqa::service {

/// Random lowercase hex identifier with a readable prefix.
inline std::string make_id(std::string_view prefix) {
  static std::mutex mutex;
  static std::mt19937_64 rng{std::random_device{}()};
  std::lock_guard lock(mutex);
  static constexpr char digits[] = "0123456789abcdef";
  std::string id(prefix);
  id += '-';
  auto bits = rng();
  for (int i = 0; i < 16; ++i, bits >>= 4) id += digits[bits & 0xf];
  return id;
}

/// Ids travel in URLs and name directories, so only [a-z0-9-] is accepted.
inline bool is_safe_id(std::string_view id) {
  if (id.empty() || id.size() > 64) return false;
  for (char c : id) {
    if (!((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '-')) return false;
  }
  return true;
}

struct JobInfo {
  train::JobSnapshot snapshot;
  std::string dataset_id;
  std::string model_id;
};

/// Runs fine-tuning jobs on background threads, at most one at a time.
class JobManager {
 public:
  explicit JobManager(std::filesystem::path models_dir) : models_dir_(std::move(models_dir)) {}

  JobManager(const JobManager&) = delete;
  JobManager& operator=(const JobManager&) = delete;

  ~JobManager() {
    cancel_ = true;
    std::vector<std::thread> workers;
    {
      std::lock_guard lock(mutex_);
      for (auto& [_, job] : jobs_) {
        if (job.worker.joinable()) workers.push_back(std::move(job.worker));
      }
    }
    for (auto& w : workers) w.join();
  }

  /// Queues the job and returns its id, or nullopt while another job is
  /// still running. The check and the insert happen under one lock.
  std::optional<std::string> start(train::FineTuneRequest request, std::string dataset_id, std::string model_id) {
    std::lock_guard lock(mutex_);
    for (const auto& [_, job] : jobs_) {
      if (!train::is_terminal(job.record->snapshot().state)) return std::nullopt;
    }
    auto id = make_id("job");
    request.artifact_path = artifact_path(id);
    Job job;
    job.record = std::make_shared<train::JobRecord>(id);
    job.dataset_id = std::move(dataset_id);
    job.model_id = std::move(model_id);
    auto record = job.record;
    job.worker = std::thread([this, record, request = std::move(request)] {
      train::run_finetune(request, *record, &cancel_);
      std::lock_guard done_lock(mutex_);
      finished_.notify_all();
    });
    jobs_.emplace(id, std::move(job));
    order_.push_back(id);
    return id;
  }

  std::optional<JobInfo> find(const std::string& id) const {
    std::lock_guard lock(mutex_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) return std::nullopt;
    return JobInfo{it->second.record->snapshot(), it->second.dataset_id, it->second.model_id};
  }

  /// Most recently started job that finished with an artifact.
  std::optional<std::string> latest_done() const {
    std::lock_guard lock(mutex_);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      if (jobs_.at(*it).record->snapshot().state == train::JobState::done) return *it;
    }
    return std::nullopt;
  }

  /// Blocks until the job reaches a terminal state.
  std::optional<train::JobSnapshot> wait(const std::string& id) {
    std::unique_lock lock(mutex_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) return std::nullopt;
    auto record = it->second.record;
    finished_.wait(lock, [&] { return train::is_terminal(record->snapshot().state); });
    return record->snapshot();
  }

  std::filesystem::path artifact_path(const std::string& job_id) const { return models_dir_ / (job_id + ".model"); }

 private:
  struct Job {
    std::shared_ptr<train::JobRecord> record;
    std::string dataset_id;
    std::string model_id;
    std::thread worker;
  };

  std::filesystem::path models_dir_;
  mutable std::mutex mutex_;
  std::condition_variable finished_;
  std::map<std::string, Job> jobs_;
  std::vector<std::string> order_;
  std::atomic<bool> cancel_{false};
};

}  // namespace deskvqa::service
