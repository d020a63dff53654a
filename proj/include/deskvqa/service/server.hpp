#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include <json.hpp>

#include "deskvqa/data/dataset.hpp"
#include "deskvqa/service/api_error.hpp"
#include "deskvqa/service/catalog.hpp"
#include "deskvqa/service/config.hpp"
#include "deskvqa/service/evaluation.hpp"
#include "deskvqa/service/jobs.hpp"
#include "deskvqa/util/fs.hpp"
#include "deskvqa/util/http.hpp"
#include "deskvqa/util/json.hpp"

namespace deskvqa::service {

namespace detail {

inline void send_json(httplib::Response& res, int status, const nlohmann::ordered_json& body) {
  res.status = status;
  res.set_content(dump_compact(body), "application/json");
}

inline std::span<const std::uint8_t> as_bytes(const std::string& s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

/// First present multipart part among `names`.
inline std::optional<httplib::MultipartFormData> part(const httplib::Request& req,
                                                       std::initializer_list<const char*> names) {
  for (const char* n : names) {
    if (req.has_file(n)) return req.get_file_value(n);
  }
  return std::nullopt;
}

inline std::string field(const httplib::Request& req, std::initializer_list<const char*> names) {
  if (auto p = part(req, names)) return p->content;
  for (const char* n : names) {
    if (req.has_param(n)) return req.get_param_value(n);
  }
  return {};
}

inline bool truthy(std::string_view v) { return v == "1" || v == "true" || v == "yes" || v == "on"; }

}  // namespace detail

/// HTTP API over the dataset, training, and evaluation modules. Every
/// anticipated failure answers with a JSON body carrying an error code.
class Server {
 public:
  explicit Server(ServiceConfig config) : config_(std::move(config)), jobs_(config_.models_dir()) {
    config_.validate();
    std::filesystem::create_directories(config_.datasets_dir());
    std::filesystem::create_directories(config_.models_dir());
    std::filesystem::create_directories(config_.public_dir());
    routes();
  }

  ~Server() { stop(); }

  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds to the configured host; port 0 picks a free port. Returns the port.
  int bind() {
    if (config_.port == 0) {
      int port = http_.bind_to_any_port(config_.host);
      if (port < 0) throw Error(ErrorKind::Io, "could not bind " + config_.host);
      return port;
    }
    if (!http_.bind_to_port(config_.host, config_.port)) {
      throw Error(ErrorKind::Io, "could not bind " + config_.host + ":" + std::to_string(config_.port));
    }
    return config_.port;
  }

  /// Serves until stop() is called.
  void run() { http_.listen_after_bind(); }
  void stop() { http_.stop(); }
  void wait_until_ready() const { http_.wait_until_ready(); }

  const ServiceConfig& config() const { return config_; }
  JobManager& jobs() { return jobs_; }

 private:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  /// Converts escaped exceptions into coded JSON responses.
  static httplib::Server::Handler guarded(Handler h) {
    return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
      try {
        h(req, res);
      } catch (const ApiError& e) {
        detail::send_json(res, e.http_status, error_body(e.code, e.what()));
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::ExtractorUnavailable || e.kind() == ErrorKind::SchemaViolation) {
          detail::send_json(res, 502, error_body(code::extractor_unavailable, e.what()));
        } else {
          detail::send_json(res, 500, error_body(code::internal_error, e.what()));
        }
      } catch (const std::exception& e) {
        detail::send_json(res, 500, error_body(code::internal_error, e.what()));
      }
    };
  }

  void routes() {
    const std::size_t slack = std::size_t{1} << 20;
    http_.set_payload_max_length(config_.max_zip_bytes + config_.max_csv_bytes + slack);
    http_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
      if (res.status == 413) {
        detail::send_json(res, 413, error_body(code::payload_too_large, "the upload exceeds the size limit"));
      } else if (res.status == 404) {
        detail::send_json(res, 404, error_body(code::not_found, "no such resource"));
      } else {
        detail::send_json(res, res.status, error_body(code::invalid_request, "request could not be processed"));
      }
      return httplib::Server::HandlerResponse::Handled;
    });

    if (!config_.sample_dir.empty() && std::filesystem::is_directory(config_.sample_dir)) {
      http_.set_mount_point("/files/sample", config_.sample_dir.string());
    }
    http_.set_mount_point("/files", config_.public_dir().string());
    if (!config_.static_dir.empty() && std::filesystem::is_directory(config_.static_dir)) {
      http_.set_mount_point("/", config_.static_dir.string());
    }

    http_.Get("/api/health", guarded([](const auto&, auto& res) { detail::send_json(res, 200, {{"status", "ok"}}); }));
    http_.Post("/api/dataset", guarded([this](const auto& req, auto& res) { post_dataset(req, res); }));
    http_.Get("/api/models", guarded([this](const auto&, auto& res) { detail::send_json(res, 200, models()); }));
    http_.Post("/api/finetune", guarded([this](const auto& req, auto& res) { post_finetune(req, res); }));
    http_.Get("/api/finetune/:job_id", guarded([this](const auto& req, auto& res) { get_job(req, res); }));
    http_.Get("/api/sample", guarded([this](const auto&, auto& res) { detail::send_json(res, 200, sample_json()); }));
    http_.Post("/api/eval/single", guarded([this](const auto& req, auto& res) { post_eval_single(req, res); }));
    http_.Post("/api/eval/batch", guarded([this](const auto& req, auto& res) { post_eval_batch(req, res); }));
  }

  std::string upload(const httplib::Request& req, std::initializer_list<const char*> names, std::string_view label,
                     std::size_t cap) const {
    auto p = detail::part(req, names);
    if (!p) throw ApiError(400, code::missing_part, "the " + std::string(label) + " upload is missing");
    if (p->content.size() > cap) {
      throw ApiError(413, code::payload_too_large,
                     "the " + std::string(label) + " upload exceeds " + std::to_string(cap >> 20) + " MB");
    }
    return p->content;
  }

  // ---- dataset -------------------------------------------------------------

  void post_dataset(const httplib::Request& req, httplib::Response& res) {
    if (!req.is_multipart_form_data()) {
      throw ApiError(400, code::missing_part, "expected a multipart form with 'images' and 'qa' parts");
    }
    auto archive = upload(req, {"images"}, "images ZIP", config_.max_zip_bytes);
    auto csv_text = upload(req, {"qa", "csv"}, "questions CSV", config_.max_csv_bytes);
    auto built = data::build_dataset(detail::as_bytes(archive), csv_text);
    nlohmann::ordered_json body;
    if (built.outcome.level == data::Level::error) {
      body = error_body(code::validation_failed, built.outcome.messages.front());
      body["banner"] = data::to_json(built.outcome);
      body["report"] = data::to_json(built.report);
      detail::send_json(res, 422, body);
      return;
    }
    auto id = make_id("ds");
    data::persist_dataset({config_.datasets_dir() / id}, built);
    body["dataset_id"] = id;
    body["banner"] = data::to_json(built.outcome);
    body["report"] = data::to_json(built.report);
    detail::send_json(res, 200, body);
  }

  bool dataset_exists(const std::string& id) const {
    return is_safe_id(id) && std::filesystem::exists(data::DatasetPaths{config_.datasets_dir() / id}.dataset());
  }

  // ---- models and fine-tuning -----------------------------------------------

  train::TrainSpec base_spec() const {
    auto s = config_.default_train;
    s.model_config.feature_dim = config_.extractor.feature_dim;
    s.model_config.max_regions = config_.extractor.max_regions;
    return s;
  }

  nlohmann::ordered_json models() const { return catalog_json(base_spec()); }

  void post_finetune(const httplib::Request& req, httplib::Response& res) {
    nlohmann::json body;
    try {
      body = req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception&) {
      throw ApiError(400, code::invalid_request, "the request body is not valid JSON");
    }
    if (!body.is_object()) throw ApiError(400, code::invalid_request, "the request body must be a JSON object");
    auto text_field = [&](const char* key) {
      auto it = body.find(key);
      return it != body.end() && it->is_string() ? it->get<std::string>() : std::string();
    };
    auto model_id = text_field("model_id");
    auto entry = find_model(model_id);
    if (!entry) throw ApiError(400, code::model_not_selected, "Please select a pre-trained model before fine-tuning.");
    auto dataset_id = text_field("dataset_id");
    if (!dataset_exists(dataset_id)) {
      throw ApiError(404, code::dataset_not_found, "dataset '" + dataset_id + "' does not exist");
    }
    auto spec = default_spec(*entry, base_spec());
    apply_overrides(spec, body.contains("overrides") ? body["overrides"] : nlohmann::json());

    train::FineTuneRequest request;
    request.dataset = {config_.datasets_dir() / dataset_id};
    request.extractor = config_.extractor;
    request.spec = spec;
    request.extraction_workers = config_.extraction_workers;
    auto job_id = jobs_.start(std::move(request), dataset_id, std::string(entry->id));
    if (!job_id) throw ApiError(409, code::job_already_running, "a fine-tuning job is already running");
    detail::send_json(res, 202, {{"job_id", *job_id}, {"state", "queued"}});
  }

  void get_job(const httplib::Request& req, httplib::Response& res) {
    const auto id = req.path_params.at("job_id");
    auto info = jobs_.find(id);
    if (!info) throw ApiError(404, code::job_not_found, "job '" + id + "' does not exist");
    auto body = train::to_json(info->snapshot);
    body["dataset_id"] = info->dataset_id;
    body["model_id"] = info->model_id;
    body["artifact_id"] = nullptr;
    if (info->snapshot.state == train::JobState::done) body["artifact_id"] = info->snapshot.job_id;
    res.set_header("Cache-Control", "max-age=1");
    detail::send_json(res, 200, body);
  }

  // ---- sample assets --------------------------------------------------------

  struct Sample {
    std::filesystem::path image;
    std::string image_name;
    std::vector<std::string> questions;
    nlohmann::json extra;
  };

  Sample load_sample() const {
    const auto manifest = config_.sample_dir / "sample.json";
    if (config_.sample_dir.empty() || !std::filesystem::exists(manifest)) {
      throw ApiError(503, code::sample_unavailable, "sample assets are not installed");
    }
    try {
      auto doc = nlohmann::json::parse(fsutil::read_text(manifest));
      Sample s;
      s.image_name = doc.at("image").get<std::string>();
      s.image = config_.sample_dir / s.image_name;
      s.questions = doc.at("questions").get<std::vector<std::string>>();
      if (doc.contains("dataset")) s.extra = doc["dataset"];
      if (s.questions.empty() || !std::filesystem::exists(s.image)) throw std::runtime_error("incomplete sample");
      return s;
    } catch (const std::exception& e) {
      throw ApiError(503, code::sample_unavailable, std::string("sample assets are unusable: ") + e.what());
    }
  }

  nlohmann::ordered_json sample_json() const {
    auto s = load_sample();
    nlohmann::ordered_json body{{"image_url", "/files/sample/" + s.image_name}, {"questions", s.questions}};
    if (s.extra.is_object()) {
      nlohmann::ordered_json links;
      for (const auto& [key, v] : s.extra.items()) {
        if (v.is_string()) links[key] = "/files/sample/" + v.get<std::string>();
      }
      body["dataset"] = links;
    }
    return body;
  }

  // ---- evaluation -----------------------------------------------------------

  struct ResolvedModel {
    std::string id;
    std::shared_ptr<EvalModel> model;
  };

  /// Explicit job/artifact id, else the latest finished job, else the newest
  /// artifact left in the models directory by an earlier run.
  ResolvedModel resolve_model(const std::string& requested) {
    std::string id = requested;
    if (id.empty()) {
      if (auto latest = jobs_.latest_done()) {
        id = *latest;
      } else {
        std::optional<std::filesystem::file_time_type> newest;
        for (const auto& entry : std::filesystem::directory_iterator(config_.models_dir())) {
          if (entry.path().extension() != ".model") continue;
          if (!newest || entry.last_write_time() > *newest) {
            newest = entry.last_write_time();
            id = entry.path().stem().string();
          }
        }
      }
    }
    if (id.empty()) throw ApiError(404, code::model_not_ready, "no fine-tuned model is available yet");
    if (!is_safe_id(id)) throw ApiError(404, code::model_not_ready, "model '" + id + "' does not exist");
    if (auto info = jobs_.find(id); info && info->snapshot.state != train::JobState::done) {
      throw ApiError(404, code::model_not_ready, "job '" + id + "' has not finished (state " +
                                                     std::string(train::to_string(info->snapshot.state)) + ")");
    }
    const auto path = jobs_.artifact_path(id);
    std::lock_guard lock(models_mutex_);
    if (auto it = models_.find(id); it != models_.end()) return {id, it->second};
    if (!std::filesystem::exists(path)) throw ApiError(404, code::model_not_ready, "model '" + id + "' does not exist");
    std::shared_ptr<EvalModel> loaded;
    try {
      loaded = EvalModel::load(path, config_.extractor);
    } catch (const Error& e) {
      throw ApiError(404, code::model_not_ready, "model '" + id + "' could not be loaded: " + e.what());
    }
    models_.emplace(id, loaded);
    return {id, loaded};
  }

  static std::string requested_model(const httplib::Request& req) {
    auto id = detail::field(req, {"artifact_id"});
    return id.empty() ? detail::field(req, {"job_id"}) : id;
  }

  void post_eval_single(const httplib::Request& req, httplib::Response& res) {
    auto resolved = resolve_model(requested_model(req));
    auto question = detail::field(req, {"question"});
    if (text::collapse_whitespace(question).empty()) {
      throw ApiError(400, code::empty_question, "Please enter a question.");
    }
    std::string bytes;
    std::string image_id = "upload";
    if (detail::truthy(detail::field(req, {"use_sample"}))) {
      auto s = load_sample();
      bytes = fsutil::read_text(s.image);
      image_id = "sample";
    } else {
      bytes = upload(req, {"image"}, "image", config_.max_zip_bytes);
    }
    SingleAnswer answer;
    try {
      answer = evaluate_single(*resolved.model, detail::as_bytes(bytes), question, {}, image_id);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::UnreadableImage || e.kind() == ErrorKind::OutOfBounds) {
        throw ApiError(422, code::image_invalid, e.what());
      }
      if (e.kind() == ErrorKind::EmptyQuestion) throw ApiError(400, code::empty_question, e.what());
      throw;
    }
    const auto eval_id = make_id("eval");
    const auto rel = std::filesystem::path("annotated") / (eval_id + ".png");
    fsutil::write_atomic(config_.public_dir() / rel, answer.annotated.png);

    auto top = nlohmann::ordered_json::array();
    for (const auto& t : answer.top) top.push_back({{"answer", t.answer}, {"probability", t.probability}});
    auto regions = nlohmann::ordered_json::array();
    for (const auto& r : answer.ranked) {
      regions.push_back({{"region_index", r.region_index},
                         {"rank", r.rank},
                         {"score", r.score},
                         {"box", answer.boxes[static_cast<std::size_t>(r.region_index)]}});
    }
    detail::send_json(res, 200,
                      {{"answer", answer.answer},
                       {"probability", answer.probability},
                       {"top", top},
                       {"regions", regions},
                       {"annotated_image_url", "/files/" + rel.generic_string()},
                       {"model_id", resolved.id},
                       {"warnings", answer.annotated.warnings}});
  }

  void post_eval_batch(const httplib::Request& req, httplib::Response& res) {
    auto resolved = resolve_model(requested_model(req));
    if (!req.is_multipart_form_data()) {
      throw ApiError(400, code::missing_part, "expected a multipart form with 'images' and 'questions' parts");
    }
    auto archive = upload(req, {"images"}, "images ZIP", config_.max_zip_bytes);
    auto csv_text = upload(req, {"questions", "qa", "csv"}, "questions CSV", config_.max_csv_bytes);
    BatchEvaluation result;
    try {
      result = evaluate_batch(*resolved.model, detail::as_bytes(archive), csv_text);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::MissingColumn) throw ApiError(400, code::invalid_csv, e.what());
      if (e.kind() == ErrorKind::MalformedArchive || e.kind() == ErrorKind::EmptyFile) {
        throw ApiError(422, code::no_valid_entries, "There is no valid image or question entry: " + std::string(e.what()));
      }
      throw;
    }
    if (result.n_processed() == 0) {
      auto body = error_body(code::no_valid_entries, "There is no valid image or question entry.");
      body["failures"] = result.failures;
      detail::send_json(res, 422, body);
      return;
    }
    const auto batch_id = make_id("batch");
    const auto rel = std::filesystem::path("results") / batch_id;
    fsutil::write_atomic(config_.public_dir() / rel / "answers.csv", result.results_csv());
    fsutil::write_atomic(config_.public_dir() / rel / "annotated.zip", result.archive.zip);

    std::vector<std::string> messages = {std::to_string(result.n_processed()) + " question(s) answered."};
    if (result.n_failed()) messages.push_back(std::to_string(result.n_failed()) + " row(s) skipped.");
    detail::send_json(res, 200,
                      {{"batch_id", batch_id},
                       {"results_csv_url", "/files/" + (rel / "answers.csv").generic_string()},
                       {"annotated_zip_url", "/files/" + (rel / "annotated.zip").generic_string()},
                       {"n_processed", result.n_processed()},
                       {"n_failed", result.n_failed()},
                       {"failures", result.failures},
                       {"annotation_errors", result.archive.errors},
                       {"model_id", resolved.id},
                       {"banner", {{"level", "success"}, {"messages", messages}}}});
  }

  ServiceConfig config_;
  JobManager jobs_;
  httplib::Server http_;
  std::mutex models_mutex_;
  std::map<std::string, std::shared_ptr<EvalModel>> models_;
};

}  // namespace deskvqa::service
