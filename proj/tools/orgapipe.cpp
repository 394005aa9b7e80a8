// orgapipe command line: batch pipeline runs, the HTTP service, CSV training and exports.

#include <pthread.h>

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "orgapipe/pipeline.hpp"
#include "orgapipe/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace orgapipe;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

int report_error(const Error& e, int code, const std::string& stage = {}) {
  json err{{"kind", to_string(e.kind())}, {"message", e.what()}};
  if (!stage.empty()) err["stage"] = stage;
  std::cerr << json{{"error", err}}.dump() << "\n";
  return code;
}

void write_output(const std::string& path, std::string_view bytes) {
  if (path.empty() || path == "-") {
    std::cout.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    std::cout.flush();
  } else {
    write_file_atomic(path, bytes);
  }
}

int cmd_run(const std::string& config_path, const std::vector<std::string>& stages, const std::string& out,
            const std::string& cache) {
  PipelineConfig cfg;
  RunOptions options;
  try {
    cfg = load_config(config_path);
    for (const auto& s : stages) options.stages.insert(stage_from_string(s));
  } catch (const Error& e) {
    return report_error(e, kExitConfig, "config");
  }
  if (!out.empty()) options.out_dir = fs::path(out);
  if (!cache.empty()) options.cache_root = fs::path(cache);
  try {
    const RunResult result = run_pipeline(cfg, options);
    json reports = json::array();
    for (const auto& r : result.reports)
      reports.push_back({{"stage", r.stage}, {"summary", r.summary}, {"warnings", r.warnings}});
    json outputs = json::array();
    for (const auto& p : result.outputs) outputs.push_back(p.string());
    std::cout << json{{"hash", result.session.hash_hex()}, {"stages", reports}, {"outputs", outputs}}.dump(2) << "\n";
    return 0;
  } catch (const Error& e) {
    std::string msg = e.what();
    std::string stage;
    if (msg.rfind("stage ", 0) == 0) stage = msg.substr(6, msg.find(':') - 6);
    return report_error(e, kExitFailure, stage);
  }
}

int cmd_serve(const std::string& host, int port, const std::string& cache) {
  const fs::path root = cache.empty() ? Cache::default_root() : fs::path(cache);
  // Block the shutdown signals before any thread starts, then wait for one on this thread.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  Service service(root);
  const int bound = service.start(host, port);
  std::cerr << "orgapipe serving /v1 on http://" << host << ":" << bound << " (cache " << root.string() << ")\n";
  int sig = 0;
  sigwait(&set, &sig);
  service.stop();
  return 0;
}

struct TrainArgs {
  std::string csv, label, arch = "knn", task = "classification", out, features;
  std::vector<std::string> hyper;
  std::uint64_t seed = 0;
  std::size_t folds = 10;
  bool no_cv = false;
};

int cmd_train(const TrainArgs& a) {
  try {
    std::vector<std::string> features;
    std::stringstream ss(a.features);
    for (std::string part; std::getline(ss, part, ',');)
      if (!part.empty()) features.push_back(part);
    ml::ModelSpec spec;
    spec.architecture = ml::architecture_from_string(a.arch);
    spec.task = ml::task_from_string(a.task);
    spec.seed = a.seed;
    for (const auto& h : a.hyper) {
      const auto eq = h.find('=');
      const auto value = eq == std::string::npos ? std::nullopt : parse_number(std::string_view(h).substr(eq + 1));
      if (!value) throw Error(ErrorKind::invalid_argument, "hyperparameters take the form name=value: " + h);
      spec.hyperparameters[h.substr(0, eq)] = *value;
    }
    const ml::Dataset data = ml::load_training_csv(a.csv, a.label, features, spec.task);
    json report{{"architecture", a.arch}, {"rows", data.size()}, {"dropped_rows", data.dropped_rows},
                {"features", data.feature_names}, {"classes", data.vocabulary}};
    std::optional<ml::CvResult> cv;
    if (!a.no_cv) {
      cv = ml::cross_validate(spec, data, {a.folds, a.seed});
      report["cv"] = {{"k", a.folds}, {"mean", cv->mean_accuracy}, {"sd", cv->sd}, {"per_fold", cv->per_fold}};
    }
    ml::TrainedModel model = ml::train(spec, data);
    if (cv) model.report.fold_accuracies = cv->per_fold;
    report["training_accuracy"] = model.report.training_accuracy;
    if (!a.out.empty()) {
      const auto bytes = ml::export_model(model);
      write_file_atomic(a.out, {reinterpret_cast<const char*>(bytes.data()), bytes.size()});
      report["model_file"] = a.out;
    }
    std::cout << report.dump(2) << "\n";
    return 0;
  } catch (const Error& e) {
    return report_error(e, e.kind() == ErrorKind::invalid_argument ? kExitConfig : kExitFailure, "train");
  }
}

struct ExportArgs {
  std::string hash, image, format = "csv", out, ids, model, cache;
  int frame = 0;
};

int cmd_export(const ExportArgs& a) {
  try {
    const Cache cache(a.cache.empty() ? Cache::default_root() : fs::path(a.cache));
    std::string hash = a.hash;
    if (hash.empty()) {
      if (a.image.empty()) throw Error(ErrorKind::invalid_argument, "pass --hash or --image");
      hash = to_hex(load_stack(a.image).content_hash);
    }
    std::vector<std::string> warnings;
    const auto session = cache.load(hash, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
    if (!session) throw Error(ErrorKind::not_found, "no cached session for " + hash);
    if (a.format == "csv") {
      write_output(a.out, export_csv(*session));
    } else if (a.format == "json") {
      std::vector<DetectionId> ids;
      std::stringstream ss(a.ids);
      for (std::string part; std::getline(ss, part, ',');) {
        const auto v = parse_number(part);
        if (!v || *v < 0) throw Error(ErrorKind::invalid_argument, "bad id '" + part + "'");
        ids.push_back(static_cast<DetectionId>(*v));
      }
      write_output(a.out, export_json(*session, ids, a.ids.empty()).dump(2) + "\n");
    } else if (a.format == "npy") {
      const auto bytes = export_npy(*session, a.frame);
      write_output(a.out, {reinterpret_cast<const char*>(bytes.data()), bytes.size()});
    } else if (a.format == "model") {
      auto it = session->models.find(a.model);
      if (it == session->models.end()) throw Error(ErrorKind::not_found, "no model named '" + a.model + "'");
      write_output(a.out, {reinterpret_cast<const char*>(it->second.data()), it->second.size()});
    } else {
      throw Error(ErrorKind::invalid_argument, "format must be csv, json, npy or model");
    }
    return 0;
  } catch (const Error& e) {
    return report_error(e, e.kind() == ErrorKind::invalid_argument ? kExitConfig : kExitFailure, "export");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"orgapipe: organoid detection, tracking, segmentation and feature analysis"};
  app.require_subcommand(1);

  std::string config, out, cache;
  std::vector<std::string> stages;
  auto* run = app.add_subcommand("run", "Run the pipeline described by a TOML config");
  run->add_option("config", config, "Pipeline config (TOML)")->required();
  run->add_option("--stage", stages, "Stage(s) to run: detect, filter, track, segment, features, export");
  run->add_option("--out", out, "Export directory (overrides output.dir)");
  run->add_option("--cache", cache, "Cache root (default: ORGAPIPE_CACHE or the user cache dir)");

  std::string host = "127.0.0.1", serve_cache;
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "Serve the /v1 HTTP API");
  serve->add_option("--port", port, "TCP port (0 picks a free one)");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--cache", serve_cache, "Cache root (default: ORGAPIPE_CACHE or the user cache dir)");

  TrainArgs t;
  auto* train = app.add_subcommand("train", "Cross-validate and train a model on a CSV table");
  train->add_option("--csv", t.csv, "Training table")->required();
  train->add_option("--label", t.label, "Label column")->required();
  train->add_option("--arch", t.arch, "knn, random_forest, adaboost, mlp or linear_svc");
  train->add_option("--features", t.features, "Comma-separated feature columns (default: all numeric)");
  train->add_option("--task", t.task, "classification or regression");
  train->add_option("--seed", t.seed, "Random seed");
  train->add_option("--folds", t.folds, "Cross-validation folds");
  train->add_flag("--no-cv", t.no_cv, "Skip cross-validation");
  train->add_option("--hp", t.hyper, "Hyperparameter override name=value (repeatable)");
  train->add_option("--out", t.out, "Write the trained model (OPML container) here");

  ExportArgs e;
  auto* exp = app.add_subcommand("export", "Export a cached session");
  exp->add_option("--hash", e.hash, "Image hash of the session");
  exp->add_option("--image", e.image, "Image file whose hash selects the session");
  exp->add_option("--format", e.format, "csv, json, npy or model");
  exp->add_option("--frame", e.frame, "Frame index for npy");
  exp->add_option("--ids", e.ids, "Comma-separated detection ids for json (default: all)");
  exp->add_option("--model", e.model, "Model name for --format model");
  exp->add_option("--out", e.out, "Output file (default: stdout)");
  exp->add_option("--cache", e.cache, "Cache root");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) return cmd_run(config, stages, out, cache);
    if (*serve) return cmd_serve(host, port, serve_cache);
    if (*train) return cmd_train(t);
    if (*exp) return cmd_export(e);
  } catch (const Error& err) {
    return report_error(err, kExitFailure);
  } catch (const std::exception& err) {
    std::cerr << json{{"error", {{"kind", "internal"}, {"message", err.what()}}}}.dump() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
