#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "orgapipe/adapter.hpp"
#include "orgapipe/ml.hpp"
#include "orgapipe/store.hpp"

namespace orgapipe {

struct DetectStageConfig {
  TilingConfig tiling;
  NmsConfig nms;
  std::optional<Rect> roi;
  int threads = 1;
  std::optional<AdapterEndpoint> adapter;  // nullopt = classical detector
};

struct SegmentStageConfig {
  SegmentOptions options;
  std::optional<AdapterEndpoint> adapter;  // nullopt = classical segmenter
};

// JSON sub-parsers shared by the config file and the HTTP API. Unknown keys are rejected.
DetectStageConfig detect_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DetectStageConfig& c);
FilterConfig filter_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FilterConfig& c);
TrackingConfig tracking_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrackingConfig& c);
SegmentStageConfig segment_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SegmentStageConfig& c);
AdapterEndpoint endpoint_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AdapterEndpoint& e);

struct SignalSource {
  std::string name;
  std::filesystem::path path;
};

struct PipelineConfig {
  std::filesystem::path image;
  std::optional<double> pixel_scale;
  std::vector<SignalSource> signals;
  DetectStageConfig detection;
  FilterConfig filter;
  bool tracking_enabled = false;
  TrackingConfig tracking;
  SegmentStageConfig segmentation;
  bool features_enabled = true;
  ml::CvConfig cv;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "orgapipe-out";
  std::vector<std::string> formats{"csv", "json", "npy"};
  std::optional<std::filesystem::path> cache_dir;
};

/// Relative paths are resolved against `base_dir`.
PipelineConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
nlohmann::json to_json(const PipelineConfig& c);
nlohmann::json toml_file_to_json(const std::filesystem::path& path);
/// Parses a TOML config file. Errors are `invalid_argument` (schema) or `format` (syntax).
PipelineConfig load_config(const std::filesystem::path& path);

enum class Stage { detect, filter, track, segment, features, export_ };
inline constexpr Stage kAllStages[] = {Stage::detect,  Stage::filter,   Stage::track,
                                       Stage::segment, Stage::features, Stage::export_};
std::string_view to_string(Stage s);
Stage stage_from_string(std::string_view s);

using ProgressFn = std::function<void(double)>;

struct StageReport {
  std::string stage;
  std::vector<std::string> warnings;
  nlohmann::json summary = nlohmann::json::object();
};

// Stage bodies, shared by the CLI and the service. Each mutates the session in place.
/// Replaces all detections with a fresh tiled detection of every frame.
StageReport stage_detect(Session& s, const DetectStageConfig& cfg, const ProgressFn& progress = {});
StageReport stage_filter(Session& s, const FilterConfig& cfg);
/// Drops previous gap fills and track ids, then links the visible records.
StageReport stage_track(Session& s, const TrackingConfig& cfg);
/// Re-segments every visible record on the primary stack and all signal channels.
StageReport stage_segment(Session& s, const SegmentStageConfig& cfg, const ProgressFn& progress = {});
StageReport stage_features(Session& s);
struct TrainRequest {
  std::string name;
  std::string label;
  std::vector<std::string> features;  // empty = default numeric columns
  ml::ModelSpec spec;
  std::optional<ml::CvConfig> cv;
};
TrainRequest train_request_from_json(const nlohmann::json& j);

/// Trains on the session table of visible records, optionally cross-validating first, and stores
/// the exported model under `request.name`.
StageReport stage_train(Session& s, const TrainRequest& request);
/// Writes `pred:<name>` for every visible record whose model features are all present.
StageReport stage_predict(Session& s, const std::string& model_name);

/// Writes `session.csv`, `session.json` and `labels_frame<NNNN>.npy` as selected by `formats`.
std::vector<std::filesystem::path> write_exports(const Session& s, const std::filesystem::path& dir,
                                                 const std::vector<std::string>& formats);

/// Loads the primary image and signal channels named by the config.
Session open_session(const PipelineConfig& cfg);

struct RunOptions {
  std::set<Stage> stages;  // empty = every enabled stage
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::filesystem::path> cache_root;
};

struct RunResult {
  Session session;
  std::vector<StageReport> reports;
  std::vector<std::filesystem::path> outputs;
};

/// Runs the selected stages and saves the session to the cache. A run that includes detection
/// starts from a fresh session (keeping cached models); otherwise the cached session is resumed.
/// Stage failures are rethrown with the stage name prefixed to the message.
RunResult run_pipeline(const PipelineConfig& cfg, const RunOptions& options = {});

}  // namespace orgapipe
