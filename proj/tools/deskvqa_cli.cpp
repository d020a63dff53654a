// deskvqa: run the service, or the dataset, training and batch-evaluation
// stages headless.

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "deskvqa/data/dataset.hpp"
#include "deskvqa/service/catalog.hpp"
#include "deskvqa/service/config.hpp"
#include "deskvqa/service/evaluation.hpp"
#include "deskvqa/service/server.hpp"
#include "deskvqa/train/job.hpp"
#include "deskvqa/util/fs.hpp"

#ifndef DESKVQA_DEFAULT_SAMPLE_DIR
#define DESKVQA_DEFAULT_SAMPLE_DIR ""
#endif

using namespace deskvqa;

namespace {

std::string read_file(const std::string& path) { return fsutil::read_text(path); }

std::span<const std::uint8_t> as_bytes(const std::string& s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

service::Server* g_server = nullptr;

extern "C" void on_signal(int) {
  if (g_server) g_server->stop();
}

struct ServeArgs {
  std::optional<std::string> config_file;
  std::optional<std::string> host;
  std::optional<int> port;
  std::optional<std::string> data_dir;
  std::optional<std::string> sample_dir;
  std::optional<std::string> static_dir;
};

int serve(const ServeArgs& a) {
  auto config = service::load_config(a.config_file ? std::optional<std::filesystem::path>(*a.config_file)
                                                   : std::nullopt);
  if (config.sample_dir.empty()) config.sample_dir = DESKVQA_DEFAULT_SAMPLE_DIR;
  if (a.host) config.host = *a.host;
  if (a.port) config.port = *a.port;
  if (a.data_dir) config.data_dir = *a.data_dir;
  if (a.sample_dir) config.sample_dir = *a.sample_dir;
  if (a.static_dir) config.static_dir = *a.static_dir;

  service::Server server(config);
  const int port = server.bind();
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cerr << "listening on http://" << config.host << ":" << port << " (data in " << config.data_dir.string()
            << ")\n";
  server.run();
  g_server = nullptr;
  return 0;
}

struct PrepArgs {
  std::string zip;
  std::string csv;
  std::optional<std::string> out;
};

/// Exit code 0 for success or warning, 2 when the dataset is rejected.
int prep(const PrepArgs& a) {
  const auto archive = read_file(a.zip);
  const auto built = data::build_dataset(as_bytes(archive), read_file(a.csv));
  nlohmann::ordered_json doc{{"banner", data::to_json(built.outcome)}, {"report", data::to_json(built.report)}};
  if (built.outcome.level != data::Level::error && a.out) {
    data::persist_dataset({*a.out}, built);
    doc["dataset_dir"] = *a.out;
  }
  std::cout << doc.dump(2) << "\n";
  return built.outcome.level == data::Level::error ? 2 : 0;
}

struct FinetuneArgs {
  std::string dataset_dir;
  std::string model_id;
  std::string out;
  std::optional<std::string> config_file;
  std::string overrides = "{}";
};

int finetune(const FinetuneArgs& a) {
  auto config = service::load_config(a.config_file ? std::optional<std::filesystem::path>(*a.config_file)
                                                   : std::nullopt);
  auto entry = service::find_model(a.model_id);
  if (!entry) throw Error(ErrorKind::InvalidConfig, "unknown model '" + a.model_id + "'");
  auto base = config.default_train;
  base.model_config.feature_dim = config.extractor.feature_dim;
  base.model_config.max_regions = config.extractor.max_regions;
  auto spec = service::default_spec(*entry, base);
  try {
    service::apply_overrides(spec, nlohmann::json::parse(a.overrides));
  } catch (const service::ApiError& e) {
    throw Error(ErrorKind::InvalidConfig, e.what());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("overrides are not valid JSON: ") + e.what());
  }

  train::FineTuneRequest request;
  request.dataset = {a.dataset_dir};
  request.extractor = config.extractor;
  request.spec = spec;
  request.artifact_path = a.out;
  request.extraction_workers = config.extraction_workers;
  train::JobRecord job("cli");
  train::TrainHooks hooks;
  hooks.on_step = [&](const train::StepEvent& ev) {
    if (ev.epoch_finished) std::cerr << "epoch " << ev.epoch << " done, last batch loss " << ev.loss << "\n";
  };
  train::run_finetune(request, job, nullptr, hooks);
  const auto snap = job.snapshot();
  std::cout << train::to_json(snap).dump(2) << "\n";
  return snap.state == train::JobState::done ? 0 : 1;
}

struct EvalBatchArgs {
  std::string model;
  std::string zip;
  std::string csv;
  std::string out;
};

int eval_batch(const EvalBatchArgs& a) {
  auto model = service::EvalModel::load(a.model, features::ExtractorSpec{});
  const auto archive = read_file(a.zip);
  auto result = service::evaluate_batch(*model, as_bytes(archive), read_file(a.csv));
  const std::filesystem::path out(a.out);
  fsutil::write_atomic(out / "answers.csv", result.results_csv());
  fsutil::write_atomic(out / "annotated.zip", result.archive.zip);
  for (const auto& f : result.failures) std::cerr << "skipped " << f << "\n";
  for (const auto& e : result.archive.errors) std::cerr << "annotation failed " << e << "\n";
  std::cout << nlohmann::ordered_json{{"n_processed", result.n_processed()},
                                      {"n_failed", result.n_failed()},
                                      {"results_csv", (out / "answers.csv").string()},
                                      {"annotated_zip", (out / "annotated.zip").string()}}
                   .dump(2)
            << "\n";
  return result.n_processed() > 0 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fine-tune and query visual question answering models"};
  app.require_subcommand(1);

  ServeArgs serve_args;
  auto* serve_cmd = app.add_subcommand("serve", "Start the HTTP service");
  serve_cmd->add_option("-c,--config", serve_args.config_file, "JSON config file")->check(CLI::ExistingFile);
  serve_cmd->add_option("--host", serve_args.host, "Bind address");
  serve_cmd->add_option("-p,--port", serve_args.port, "Port, 0 picks a free one")->check(CLI::Range(0, 65535));
  serve_cmd->add_option("--data-dir", serve_args.data_dir, "Where datasets, models and results are kept");
  serve_cmd->add_option("--sample-dir", serve_args.sample_dir, "Directory with sample.json");
  serve_cmd->add_option("--static-dir", serve_args.static_dir, "Front-end files served at /");

  PrepArgs prep_args;
  auto* prep_cmd = app.add_subcommand("prep", "Validate and clean an images ZIP plus questions CSV");
  prep_cmd->add_option("zip", prep_args.zip, "Images archive")->required()->check(CLI::ExistingFile);
  prep_cmd->add_option("csv", prep_args.csv, "Questions and answers CSV")->required()->check(CLI::ExistingFile);
  prep_cmd->add_option("-o,--out", prep_args.out, "Write the cleaned dataset to this directory");

  FinetuneArgs ft_args;
  auto* ft_cmd = app.add_subcommand("finetune", "Fine-tune on a dataset directory written by prep");
  ft_cmd->add_option("dataset", ft_args.dataset_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ft_cmd->add_option("-m,--model", ft_args.model_id, "visualbert or lxmert")->required();
  ft_cmd->add_option("-o,--out", ft_args.out, "Artifact path")->required();
  ft_cmd->add_option("-c,--config", ft_args.config_file, "JSON config file")->check(CLI::ExistingFile);
  ft_cmd->add_option("--overrides", ft_args.overrides, "JSON object of hyperparameter overrides");

  EvalBatchArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval-batch", "Answer every row of a questions CSV");
  eval_cmd->add_option("-m,--model", eval_args.model, "Model artifact")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("zip", eval_args.zip, "Images archive")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("csv", eval_args.csv, "Questions CSV")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("-o,--out", eval_args.out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*serve_cmd) return serve(serve_args);
    if (*prep_cmd) return prep(prep_args);
    if (*ft_cmd) return finetune(ft_args);
    if (*eval_cmd) return eval_batch(eval_args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
