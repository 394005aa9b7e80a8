#include "orgapipe/pipeline.hpp"

#include <cstdio>
#include <map>

#include <toml.hpp>

#include "orgapipe/error.hpp"

namespace orgapipe {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

/// Strict object reader: typed lookups plus rejection of unknown keys.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw Error(ErrorKind::invalid_argument, where_ + " must be a table/object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_[key].is_null();
  }

  double number(const std::string& key, double def) {
    if (!has(key)) return def;
    if (!j_[key].is_number()) fail(key, "a number");
    return j_[key].get<double>();
  }

  std::int64_t integer(const std::string& key, std::int64_t def) {
    if (!has(key)) return def;
    if (!j_[key].is_number_integer()) fail(key, "an integer");
    return j_[key].get<std::int64_t>();
  }

  bool boolean(const std::string& key, bool def) {
    if (!has(key)) return def;
    if (!j_[key].is_boolean()) fail(key, "a boolean");
    return j_[key].get<bool>();
  }

  std::string string(const std::string& key, const std::string& def) {
    if (!has(key)) return def;
    if (!j_[key].is_string()) fail(key, "a string");
    return j_[key].get<std::string>();
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string path(const std::string& key) const { return where_ + "." + key; }

  void done() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.contains(key)) throw Error(ErrorKind::invalid_argument, "unknown key " + where_ + "." + key);
  }

  [[noreturn]] void fail(const std::string& key, const char* what) const {
    throw Error(ErrorKind::invalid_argument, where_ + "." + key + " must be " + what);
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

Rect rect_value(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 4 || !std::all_of(j.begin(), j.end(), [](const json& v) { return v.is_number(); }))
    throw Error(ErrorKind::invalid_argument, where + " must be [x_min, y_min, x_max, y_max]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

int to_int(std::int64_t v, const std::string& where) {
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
    throw Error(ErrorKind::invalid_argument, where + " is out of range");
  return static_cast<int>(v);
}

json node_to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    json out = json::object();
    for (const auto& [key, value] : *t) out[std::string(key.str())] = node_to_json(value);
    return out;
  }
  if (const auto* a = node.as_array()) {
    json out = json::array();
    for (const auto& value : *a) out.push_back(node_to_json(value));
    return out;
  }
  if (const auto* v = node.as_integer()) return v->get();
  if (const auto* v = node.as_floating_point()) return v->get();
  if (const auto* v = node.as_boolean()) return v->get();
  if (const auto* v = node.as_string()) return v->get();
  std::ostringstream ss;
  if (const auto* v = node.as_date()) ss << *v;
  else if (const auto* v = node.as_time()) ss << *v;
  else if (const auto* v = node.as_date_time()) ss << *v;
  return ss.str();
}

fs::path resolve(const fs::path& p, const fs::path& base) { return p.is_absolute() ? p : base / p; }

}  // namespace

// ---------------------------------------------------------------------------------------------
// Sub-parsers

AdapterEndpoint endpoint_from_json(const json& j) {
  Fields f(j, "adapter");
  AdapterEndpoint e;
  const std::string transport = f.string("transport", "stdio");
  if (transport == "stdio") e.transport = Transport::stdio;
  else if (transport == "http") e.transport = Transport::http;
  else throw Error(ErrorKind::invalid_argument, "adapter.transport must be 'stdio' or 'http'");
  e.address = f.string("address", "");
  e.timeout_seconds = f.number("timeout", e.timeout_seconds);
  e.max_in_flight = to_int(f.integer("max_in_flight", e.max_in_flight), f.path("max_in_flight"));
  f.done();
  e.validate();
  return e;
}

json to_json(const AdapterEndpoint& e) {
  return {{"transport", e.transport == Transport::stdio ? "stdio" : "http"},
          {"address", e.address},
          {"timeout", e.timeout_seconds},
          {"max_in_flight", e.max_in_flight}};
}

namespace {

std::optional<AdapterEndpoint> backend_from(Fields& f) {
  const std::string backend = f.string("backend", "classical");
  if (backend == "classical") {
    if (f.has("adapter")) throw Error(ErrorKind::invalid_argument, f.path("adapter") + " requires backend = 'adapter'");
    return std::nullopt;
  }
  if (backend != "adapter") throw Error(ErrorKind::invalid_argument, f.path("backend") + " must be 'classical' or 'adapter'");
  if (!f.has("adapter")) throw Error(ErrorKind::invalid_argument, f.path("adapter") + " is required");
  return endpoint_from_json(f.raw("adapter"));
}

}  // namespace

DetectStageConfig detect_config_from_json(const json& j) {
  Fields f(j, "detection");
  DetectStageConfig c;
  c.tiling.window_size = to_int(f.integer("window_size", c.tiling.window_size), f.path("window_size"));
  if (f.has("downsampling_rates")) {
    const json& rates = f.raw("downsampling_rates");
    if (!rates.is_array()) f.fail("downsampling_rates", "an array of integers");
    c.tiling.downsampling_rates.clear();
    for (const auto& r : rates) {
      if (!r.is_number_integer()) f.fail("downsampling_rates", "an array of integers");
      c.tiling.downsampling_rates.push_back(to_int(r.get<std::int64_t>(), f.path("downsampling_rates")));
    }
  }
  c.nms.iou_threshold = f.number("nms_iou", c.nms.iou_threshold);
  if (f.has("roi")) c.roi = rect_value(f.raw("roi"), f.path("roi"));
  c.threads = to_int(f.integer("threads", c.threads), f.path("threads"));
  c.adapter = backend_from(f);
  f.done();
  c.tiling.validate();
  c.nms.validate();
  if (c.threads < 1) throw Error(ErrorKind::invalid_argument, "detection.threads must be >= 1");
  return c;
}

json to_json(const DetectStageConfig& c) {
  json j{{"window_size", c.tiling.window_size},
         {"downsampling_rates", c.tiling.downsampling_rates},
         {"nms_iou", c.nms.iou_threshold},
         {"threads", c.threads},
         {"backend", c.adapter ? "adapter" : "classical"}};
  if (c.roi) j["roi"] = {c.roi->x_min, c.roi->y_min, c.roi->x_max, c.roi->y_max};
  if (c.adapter) j["adapter"] = to_json(*c.adapter);
  return j;
}

FilterConfig filter_config_from_json(const json& j) {
  Fields f(j, "filter");
  FilterConfig c;
  c.min_confidence = f.number("min_confidence", c.min_confidence);
  c.min_diameter = f.number("min_diameter", c.min_diameter);
  f.done();
  c.validate();
  return c;
}

json to_json(const FilterConfig& c) {
  return {{"min_confidence", c.min_confidence}, {"min_diameter", c.min_diameter}};
}

TrackingConfig tracking_config_from_json(const json& j) {
  Fields f(j, "tracking");
  TrackingConfig c;
  c.search_radius = f.number("search_radius", c.search_radius);
  c.memory = to_int(f.integer("memory", c.memory), f.path("memory"));
  c.fill_gaps = f.boolean("fill_gaps", c.fill_gaps);
  f.has("enabled");  // consumed by the pipeline config
  f.done();
  c.validate();
  return c;
}

json to_json(const TrackingConfig& c) {
  return {{"search_radius", c.search_radius}, {"memory", c.memory}, {"fill_gaps", c.fill_gaps}};
}

SegmentStageConfig segment_config_from_json(const json& j) {
  Fields f(j, "segmentation");
  SegmentStageConfig c;
  c.options.padding_fraction = f.number("padding", c.options.padding_fraction);
  c.options.simplify_tolerance = f.number("simplify_tolerance", c.options.simplify_tolerance);
  c.options.threads = to_int(f.integer("threads", c.options.threads), f.path("threads"));
  c.adapter = backend_from(f);
  f.done();
  if (!(c.options.padding_fraction >= 0.0)) throw Error(ErrorKind::invalid_argument, "segmentation.padding must be >= 0");
  if (!(c.options.simplify_tolerance >= 0.0))
    throw Error(ErrorKind::invalid_argument, "segmentation.simplify_tolerance must be >= 0");
  if (c.options.threads < 1) throw Error(ErrorKind::invalid_argument, "segmentation.threads must be >= 1");
  return c;
}

json to_json(const SegmentStageConfig& c) {
  json j{{"padding", c.options.padding_fraction},
         {"simplify_tolerance", c.options.simplify_tolerance},
         {"threads", c.options.threads},
         {"backend", c.adapter ? "adapter" : "classical"}};
  if (c.adapter) j["adapter"] = to_json(*c.adapter);
  return j;
}

// ---------------------------------------------------------------------------------------------
// Whole config

PipelineConfig config_from_json(const json& j, const fs::path& base_dir) {
  Fields top(j, "config");
  PipelineConfig c;
  c.seed = static_cast<std::uint64_t>(top.integer("seed", 0));

  if (!top.has("input")) throw Error(ErrorKind::invalid_argument, "missing [input] table");
  {
    Fields in(top.raw("input"), "input");
    if (!in.has("image")) throw Error(ErrorKind::invalid_argument, "missing input.image path");
    c.image = resolve(in.string("image", ""), base_dir);
    if (in.has("pixel_scale")) {
      c.pixel_scale = in.number("pixel_scale", 1.0);
      if (!(*c.pixel_scale > 0.0)) throw Error(ErrorKind::invalid_argument, "input.pixel_scale must be > 0");
    }
    if (in.has("signals")) {
      const json& sig = in.raw("signals");
      if (!sig.is_array()) in.fail("signals", "an array of tables");
      for (const auto& s : sig) {
        Fields sf(s, "input.signals[]");
        SignalSource src{sf.string("name", ""), resolve(sf.string("path", ""), base_dir)};
        sf.done();
        if (src.name.empty() || src.path.empty())
          throw Error(ErrorKind::invalid_argument, "input.signals entries need name and path");
        c.signals.push_back(std::move(src));
      }
    }
    in.done();
  }
  if (top.has("detection")) c.detection = detect_config_from_json(top.raw("detection"));
  if (top.has("filter")) c.filter = filter_config_from_json(top.raw("filter"));
  if (top.has("tracking")) {
    const json& t = top.raw("tracking");
    c.tracking = tracking_config_from_json(t);
    c.tracking_enabled = t.value("enabled", true);
  }
  if (top.has("segmentation")) c.segmentation = segment_config_from_json(top.raw("segmentation"));
  if (top.has("features")) {
    Fields f(top.raw("features"), "features");
    c.features_enabled = f.boolean("enabled", true);
    f.done();
  }
  if (top.has("cv")) {
    Fields f(top.raw("cv"), "cv");
    const auto k = f.integer("k", 10);
    if (k < 2) throw Error(ErrorKind::invalid_argument, "cv.k must be >= 2");
    c.cv.k = static_cast<std::size_t>(k);
    c.cv.seed = static_cast<std::uint64_t>(f.integer("seed", static_cast<std::int64_t>(c.seed)));
    f.done();
  } else {
    c.cv.seed = c.seed;
  }
  if (top.has("output")) {
    Fields f(top.raw("output"), "output");
    c.output_dir = resolve(f.string("dir", c.output_dir.string()), base_dir);
    if (f.has("formats")) {
      c.formats.clear();
      for (const auto& v : f.raw("formats")) {
        if (!v.is_string()) f.fail("formats", "an array of strings");
        const auto fmt = v.get<std::string>();
        if (fmt != "csv" && fmt != "json" && fmt != "npy")
          throw Error(ErrorKind::invalid_argument, "output.formats accepts csv, json, npy");
        c.formats.push_back(fmt);
      }
    }
    f.done();
  } else {
    c.output_dir = resolve(c.output_dir, base_dir);
  }
  if (top.has("cache")) {
    Fields f(top.raw("cache"), "cache");
    if (f.has("dir")) c.cache_dir = resolve(f.string("dir", ""), base_dir);
    f.done();
  }
  top.done();
  return c;
}

json to_json(const PipelineConfig& c) {
  json signals = json::array();
  for (const auto& s : c.signals) signals.push_back({{"name", s.name}, {"path", s.path.string()}});
  json input{{"image", c.image.string()}, {"signals", std::move(signals)}};
  if (c.pixel_scale) input["pixel_scale"] = *c.pixel_scale;
  json tracking = to_json(c.tracking);
  tracking["enabled"] = c.tracking_enabled;
  json j{{"seed", c.seed},
         {"input", std::move(input)},
         {"detection", to_json(c.detection)},
         {"filter", to_json(c.filter)},
         {"tracking", std::move(tracking)},
         {"segmentation", to_json(c.segmentation)},
         {"features", {{"enabled", c.features_enabled}}},
         {"cv", {{"k", c.cv.k}, {"seed", c.cv.seed}}},
         {"output", {{"dir", c.output_dir.string()}, {"formats", c.formats}}}};
  if (c.cache_dir) j["cache"] = {{"dir", c.cache_dir->string()}};
  return j;
}

json toml_file_to_json(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorKind::io, "config file not found: " + path.string());
  try {
    return node_to_json(toml::parse_file(path.string()));
  } catch (const toml::parse_error& e) {
    std::ostringstream ss;
    ss << "config parse error at " << e.source().begin << ": " << e.description();
    throw Error(ErrorKind::format, ss.str());
  }
}

PipelineConfig load_config(const fs::path& path) {
  return config_from_json(toml_file_to_json(path), fs::absolute(path).parent_path());
}

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::detect: return "detect";
    case Stage::filter: return "filter";
    case Stage::track: return "track";
    case Stage::segment: return "segment";
    case Stage::features: return "features";
    case Stage::export_: return "export";
  }
  return "?";
}

Stage stage_from_string(std::string_view s) {
  for (Stage st : kAllStages)
    if (to_string(st) == s) return st;
  throw Error(ErrorKind::invalid_argument, "unknown stage '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------------------------
// Stages

namespace {

void require_capability(AdapterClient& client, bool detect) {
  const Capabilities caps = client.health();
  if (detect ? !caps.detect : !caps.segment)
    throw Error(ErrorKind::invalid_argument,
                std::string("adapter endpoint lacks the ") + (detect ? "detect" : "segment") + " capability");
}

}  // namespace

StageReport stage_detect(Session& s, const DetectStageConfig& cfg, const ProgressFn& progress) {
  StageReport report;
  report.stage = "detect";
  std::unique_ptr<AdapterClient> client;
  std::unique_ptr<Detector> detector;
  AdapterDetector* remote = nullptr;
  if (cfg.adapter) {
    client = std::make_unique<AdapterClient>(*cfg.adapter);
    require_capability(*client, true);
    auto d = std::make_unique<AdapterDetector>(*client);
    remote = d.get();
    detector = std::move(d);
  } else {
    detector = std::make_unique<ClassicalDetector>();
  }
  DetectOptions options{cfg.tiling, cfg.nms, cfg.roi, cfg.threads};
  if (cfg.roi) validate_roi(*cfg.roi, s.image.width(), s.image.height());

  clear_detections(s);
  DetectionIdSource ids(s.next_detection_id);
  std::size_t tile_errors = 0;
  const std::size_t frames = s.image.frame_count();
  for (std::size_t f = 0; f < frames; ++f) {
    DetectionRun run = detect_frame(s.image.frames[f], static_cast<int>(f), *detector, options, ids);
    for (auto& r : run.records) s.detections[r.detection_id] = r;
    for (const auto& e : run.tile_errors)
      report.warnings.push_back("frame " + std::to_string(f) + " tile " + std::to_string(e.tile_index) + " (rate " +
                                std::to_string(e.rate) + "): " + std::string(to_string(e.kind)) + ": " + e.message);
    tile_errors += run.tile_errors.size();
    if (progress) progress(static_cast<double>(f + 1) / static_cast<double>(frames));
  }
  s.next_detection_id = ids.peek();
  const std::size_t dropped = remote ? remote->dropped() : 0;
  if (dropped) report.warnings.push_back(std::to_string(dropped) + " invalid adapter boxes dropped");
  report.summary = {{"detections", s.detections.size()}, {"tile_errors", tile_errors}, {"dropped_boxes", dropped}};
  return report;
}

StageReport stage_filter(Session& s, const FilterConfig& cfg) {
  cfg.validate();
  s.filter = cfg;
  StageReport report;
  report.stage = "filter";
  report.summary = {{"visible", s.visible().size()}, {"total", s.detections.size()}};
  return report;
}

StageReport stage_track(Session& s, const TrackingConfig& cfg) {
  cfg.validate();
  std::vector<DetectionId> fills;
  for (const auto& [id, r] : s.detections)
    if (r.provenance == Provenance::gap_fill) fills.push_back(id);
  for (DetectionId id : fills) delete_detection(s, id);
  s.tracks = {};
  for (auto& [id, r] : s.detections) r.track_id.reset();

  const auto frames = s.visible_by_frame();
  TrackAssignment assignment = link(frames, cfg);
  std::size_t filled = 0;
  if (cfg.fill_gaps) {
    DetectionIdSource ids(s.next_detection_id);
    for (auto& r : fill_gaps(assignment, frames, ids)) {
      s.detections[r.detection_id] = r;
      ++filled;
    }
    s.next_detection_id = ids.peek();
  }
  for (const auto& [id, track] : assignment.track_of) s.detections.at(id).track_id = track;
  s.tracks = std::move(assignment);

  StageReport report;
  report.stage = "track";
  report.summary = {{"tracks", s.tracks.tracks.size()}, {"gap_fills", filled}, {"removed_gap_fills", fills.size()}};
  return report;
}

StageReport stage_segment(Session& s, const SegmentStageConfig& cfg, const ProgressFn& progress) {
  StageReport report;
  report.stage = "segment";
  std::unique_ptr<AdapterClient> client;
  std::unique_ptr<Segmenter> segmenter;
  if (cfg.adapter) {
    client = std::make_unique<AdapterClient>(*cfg.adapter);
    require_capability(*client, false);
    segmenter = std::make_unique<AdapterSegmenter>(*client);
  } else {
    segmenter = std::make_unique<ClassicalSegmenter>();
  }
  const auto records = s.visible();
  for (const auto& r : records) std::erase_if(s.masks, [&](const auto& e) { return e.first.detection_id == r.detection_id; });
  SegmentationRun run = segment(records, s.image, s.signals, *segmenter, cfg.options);
  for (auto& m : run.masks) {
    MaskKey key{m.detection_id, m.channel_name};
    s.masks[key] = std::move(m);
  }
  std::size_t failed = 0;
  for (const auto& issue : run.issues) {
    report.warnings.push_back("detection " + std::to_string(issue.detection_id) + " channel " + issue.channel + ": " +
                              issue.reason);
    if (issue.failed) ++failed;
  }
  if (progress) progress(1.0);
  report.summary = {{"masks", run.masks.size()}, {"issues", run.issues.size()}, {"failed", failed}};
  return report;
}

StageReport stage_features(Session& s) {
  const auto records = s.visible();
  compute_all(records, s.masks, s.image, s.signals, s.features);
  StageReport report;
  report.stage = "features";
  for (const auto& r : records)
    if (auto it = s.features.flags().find(r.detection_id); it != s.features.flags().end())
      for (const auto& flag : it->second)
        report.warnings.push_back("detection " + std::to_string(r.detection_id) + ": " + flag);
  report.summary = {{"rows", records.size()}, {"columns", s.features.columns().size()}};
  return report;
}

TrainRequest train_request_from_json(const json& j) {
  Fields f(j, "train");
  TrainRequest r;
  r.name = f.string("name", "");
  validate_entry_name(r.name);
  r.label = f.string("label", "");
  if (r.label.empty()) throw Error(ErrorKind::invalid_argument, "train.label is required");
  if (f.has("features")) {
    for (const auto& v : f.raw("features")) {
      if (!v.is_string()) f.fail("features", "an array of column names");
      r.features.push_back(v.get<std::string>());
    }
  }
  r.spec.architecture = ml::architecture_from_string(f.string("architecture", "knn"));
  r.spec.task = ml::task_from_string(f.string("task", "classification"));
  r.spec.seed = static_cast<std::uint64_t>(f.integer("seed", 0));
  if (f.has("hyperparameters")) {
    const json& hp = f.raw("hyperparameters");
    if (!hp.is_object()) f.fail("hyperparameters", "an object of numbers");
    for (const auto& [k, v] : hp.items()) {
      if (!v.is_number()) f.fail("hyperparameters", "an object of numbers");
      r.spec.hyperparameters[k] = v.get<double>();
    }
  }
  ml::resolve_hyperparameters(r.spec);
  if (f.has("cv")) {
    Fields c(f.raw("cv"), "train.cv");
    ml::CvConfig cv;
    const auto k = c.integer("k", 10);
    if (k < 2) throw Error(ErrorKind::invalid_argument, "train.cv.k must be >= 2");
    cv.k = static_cast<std::size_t>(k);
    cv.seed = static_cast<std::uint64_t>(c.integer("seed", static_cast<std::int64_t>(r.spec.seed)));
    c.done();
    r.cv = cv;
  }
  f.done();
  return r;
}

StageReport stage_train(Session& s, const TrainRequest& request) {
  validate_entry_name(request.name);
  const ml::Dataset data = ml::make_dataset(session_table(s), request.label, request.features, request.spec.task);
  StageReport report;
  report.stage = "train";
  std::optional<ml::CvResult> cv;
  if (request.cv) cv = ml::cross_validate(request.spec, data, *request.cv);
  ml::TrainedModel model = ml::train(request.spec, data);
  if (cv) model.report.fold_accuracies = cv->per_fold;
  s.models[request.name] = ml::export_model(model);
  report.summary = {{"model", request.name},
                    {"architecture", ml::to_string(request.spec.architecture)},
                    {"rows", data.size()},
                    {"dropped_rows", data.dropped_rows},
                    {"features", data.feature_names},
                    {"classes", data.vocabulary},
                    {"training_accuracy", model.report.training_accuracy}};
  if (cv)
    report.summary["cv"] = {{"k", request.cv->k}, {"mean", cv->mean_accuracy}, {"sd", cv->sd}, {"per_fold", cv->per_fold}};
  if (data.dropped_rows) report.warnings.push_back(std::to_string(data.dropped_rows) + " rows dropped for absent cells");
  return report;
}

StageReport stage_predict(Session& s, const std::string& model_name) {
  auto it = s.models.find(model_name);
  if (it == s.models.end()) throw Error(ErrorKind::not_found, "unknown model '" + model_name + "'");
  const ml::TrainedModel model = ml::import_model(it->second);
  const TabularData table = session_table(s);
  std::vector<std::size_t> cols;
  for (const auto& name : model.schema) {
    const auto c = table.column_index(name);
    if (!c) throw Error(ErrorKind::schema_mismatch, "session lacks model feature column '" + name + "'");
    cols.push_back(*c);
  }
  std::vector<DetectionId> ids;
  std::vector<double> values;
  for (const auto& row : table.rows) {
    std::vector<double> v;
    for (std::size_t c : cols) {
      if (const auto* d = std::get_if<double>(&row[c])) v.push_back(*d);
      else if (const auto* t = std::get_if<std::string>(&row[c]); t && parse_number(*t)) v.push_back(*parse_number(*t));
      else break;
    }
    if (v.size() != cols.size()) continue;
    ids.push_back(std::stoull(std::get<std::string>(row[0])));
    values.insert(values.end(), v.begin(), v.end());
  }
  const std::string column = "pred:" + model_name;
  for (const auto& [id, r] : s.detections) s.features.erase(id, column);
  s.features.ensure_column({column, ColumnKind::predicted, {}, model.vocabulary});
  if (!ids.empty()) {
    ml::Matrix x(ids.size(), cols.size());
    x.data = std::move(values);
    const ml::Prediction p = ml::predict(model, model.schema, x);
    for (std::size_t i = 0; i < ids.size(); ++i) s.features.set(ids[i], column, p.values[i]);
  }
  StageReport report;
  report.stage = "predict";
  report.summary = {{"model", model_name}, {"column", column}, {"predicted", ids.size()},
                    {"skipped", table.rows.size() - ids.size()}};
  return report;
}

std::vector<fs::path> write_exports(const Session& s, const fs::path& dir, const std::vector<std::string>& formats) {
  fs::create_directories(dir);
  std::vector<fs::path> out;
  auto want = [&](const char* f) { return std::find(formats.begin(), formats.end(), f) != formats.end(); };
  if (want("csv")) {
    out.push_back(dir / "session.csv");
    write_file_atomic(out.back(), export_csv(s));
  }
  if (want("json")) {
    out.push_back(dir / "session.json");
    write_file_atomic(out.back(), export_json(s, {}, true).dump(2) + "\n");
  }
  if (want("npy")) {
    for (std::size_t f = 0; f < s.image.frame_count(); ++f) {
      char name[32];
      std::snprintf(name, sizeof name, "labels_frame%04zu.npy", f);
      const auto bytes = export_npy(s, static_cast<int>(f));
      out.push_back(dir / name);
      write_file_atomic(out.back(), {reinterpret_cast<const char*>(bytes.data()), bytes.size()});
    }
  }
  return out;
}

Session open_session(const PipelineConfig& cfg) {
  if (!fs::exists(cfg.image)) throw Error(ErrorKind::not_found, "input image not found: " + cfg.image.string());
  ImageStack image = load_stack(cfg.image);
  image.pixel_scale = cfg.pixel_scale;
  std::vector<SignalChannel> signals;
  for (const auto& src : cfg.signals) {
    if (!fs::exists(src.path)) throw Error(ErrorKind::not_found, "signal image not found: " + src.path.string());
    ImageStack st = load_stack(src.path);
    st.pixel_scale = cfg.pixel_scale;
    signals.push_back({src.name, std::move(st)});
  }
  return make_session(std::move(image), std::move(signals));
}

RunResult run_pipeline(const PipelineConfig& cfg, const RunOptions& options) {
  auto selected = [&](Stage st) { return options.stages.empty() || options.stages.contains(st); };
  const Cache cache(options.cache_root ? *options.cache_root
                                       : cfg.cache_dir ? *cfg.cache_dir : Cache::default_root());
  RunResult result{open_session(cfg), {}, {}};
  Session& s = result.session;
  std::vector<std::string> cache_warnings;
  std::optional<Session> cached = cache.load(s.hash_hex(), &cache_warnings);
  if (cached && (cached->signals.size() != s.signals.size() ||
                 !std::equal(s.signals.begin(), s.signals.end(), cached->signals.begin(),
                             [](const SignalChannel& a, const SignalChannel& b) { return a.name == b.name; }))) {
    cache_warnings.push_back("cached session has different signal channels; starting fresh");
    cached.reset();
  }
  if (cached) {
    if (selected(Stage::detect)) s.models = cached->models;
    else {
      // Keep the pixel metadata from this config.
      cached->image.pixel_scale = s.image.pixel_scale;
      cached->image.source_path = s.image.source_path;
      for (std::size_t i = 0; i < s.signals.size(); ++i) {
        cached->signals[i].stack.pixel_scale = s.signals[i].stack.pixel_scale;
        cached->signals[i].stack.source_path = s.signals[i].stack.source_path;
      }
      s = std::move(*cached);
    }
  }

  auto run_stage = [&](Stage st, auto&& body) {
    if (!selected(st)) return;
    try {
      result.reports.push_back(body());
    } catch (const Error& e) {
      throw Error(e.kind(), "stage " + std::string(to_string(st)) + ": " + e.what());
    } catch (const std::exception& e) {
      throw Error(ErrorKind::io, "stage " + std::string(to_string(st)) + ": " + e.what());
    }
  };
  run_stage(Stage::detect, [&] { return stage_detect(s, cfg.detection); });
  run_stage(Stage::filter, [&] { return stage_filter(s, cfg.filter); });
  if (cfg.tracking_enabled || options.stages.contains(Stage::track))
    run_stage(Stage::track, [&] { return stage_track(s, cfg.tracking); });
  run_stage(Stage::segment, [&] { return stage_segment(s, cfg.segmentation); });
  if (cfg.features_enabled || options.stages.contains(Stage::features))
    run_stage(Stage::features, [&] { return stage_features(s); });
  if (!result.reports.empty()) result.reports.front().warnings.insert(result.reports.front().warnings.begin(),
                                                                      cache_warnings.begin(), cache_warnings.end());
  cache.save(s);
  run_stage(Stage::export_, [&] {
    StageReport report;
    report.stage = "export";
    result.outputs = write_exports(s, options.out_dir ? *options.out_dir : cfg.output_dir, cfg.formats);
    report.summary = {{"files", result.outputs.size()}};
    return report;
  });
  return result;
}

}  // namespace orgapipe
