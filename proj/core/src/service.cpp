#include "orgapipe/service.hpp"

#include <atomic>
#include <ctime>
#include <map>
#include <mutex>
#include <shared_mutex>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "orgapipe/pipeline.hpp"

namespace orgapipe {

using nlohmann::json;
namespace fs = std::filesystem;

int http_status(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::not_found: return 404;
    case ErrorKind::conflict: return 409;
    case ErrorKind::timeout: return 504;
    case ErrorKind::transport: return 502;
    case ErrorKind::io: return 500;
    case ErrorKind::invalid_argument:
    case ErrorKind::format:
    case ErrorKind::checksum:
    case ErrorKind::version:
    case ErrorKind::schema_mismatch:
    case ErrorKind::protocol: return 422;
  }
  return 500;
}

namespace {

struct Slot {
  std::shared_mutex data;
  std::atomic<bool> writer{false};
  Session session;
};

/// Claims the single-writer right on a slot; throws conflict when another mutation is running.
class WriterGuard {
 public:
  explicit WriterGuard(std::shared_ptr<Slot> slot) : slot_(std::move(slot)) {
    if (slot_->writer.exchange(true)) throw Error(ErrorKind::conflict, "session is busy with another mutation");
  }
  ~WriterGuard() { slot_->writer = false; }
  WriterGuard(const WriterGuard&) = delete;
  WriterGuard& operator=(const WriterGuard&) = delete;

 private:
  std::shared_ptr<Slot> slot_;
};

struct Job {
  std::string id;
  std::string kind;
  std::string state = "pending";
  double progress = 0.0;
  json result;
  json error;
};

json report_json(const StageReport& r) {
  return {{"stage", r.stage}, {"summary", r.summary}, {"warnings", r.warnings}};
}

json session_summary(const Session& s) {
  json signals = json::array();
  for (const auto& ch : s.signals) signals.push_back(ch.name);
  json columns = json::array();
  for (const auto& c : s.features.columns()) columns.push_back(c.name);
  json models = json::array();
  for (const auto& [name, bytes] : s.models) models.push_back(name);
  json sessions = json::array();
  for (const auto& [name, sess] : s.annotation_sessions) sessions.push_back(session_to_json(sess));
  return {{"hash", s.hash_hex()},
          {"image",
           {{"frames", s.image.frame_count()},
            {"height", s.image.height()},
            {"width", s.image.width()},
            {"channels", s.image.channels()},
            {"pixel_scale", s.image.pixel_scale ? json(*s.image.pixel_scale) : json(nullptr)},
            {"source_path", s.image.source_path}}},
          {"signals", std::move(signals)},
          {"detections", s.detections.size()},
          {"visible", s.visible().size()},
          {"tracks", s.tracks.tracks.size()},
          {"masks", s.masks.size()},
          {"feature_columns", std::move(columns)},
          {"filter", to_json(s.filter)},
          {"next_detection_id", s.next_detection_id},
          {"models", std::move(models)},
          {"annotation_sessions", std::move(sessions)}};
}

json record_detail(const Session& s, DetectionId id) {
  json rec = export_json(s, {id})["records"][0];
  rec["visible"] = s.filter.accepts(s.record(id));
  json flags = json::array();
  if (auto it = s.features.flags().find(id); it != s.features.flags().end())
    for (const auto& f : it->second) flags.push_back(f);
  rec["flags"] = std::move(flags);
  return rec;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  json j = json::parse(req.body, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorKind::invalid_argument, "request body is not valid JSON");
  return j;
}

DetectionId parse_id(const std::string& text) {
  const auto v = parse_number(text);
  if (!v || *v < 1 || *v != std::floor(*v) || *v > 9.0e15) throw Error(ErrorKind::not_found, "unknown detection id");
  return static_cast<DetectionId>(*v);
}

Rect bbox_from(const json& j) {
  if (!j.is_array() || j.size() != 4 || !std::all_of(j.begin(), j.end(), [](const json& v) { return v.is_number(); }))
    throw Error(ErrorKind::invalid_argument, "bbox must be [x_min, y_min, x_max, y_max]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

/// Translates the in-flight exception into an error response.
void respond_error(httplib::Response& res) {
  auto send = [&](int status, std::string_view kind, const char* message) {
    res.status = status;
    res.set_content(json{{"error", {{"kind", kind}, {"message", message}}}}.dump(), "application/json");
  };
  try {
    throw;
  } catch (const Error& e) {
    send(http_status(e.kind()), to_string(e.kind()), e.what());
  } catch (const json::exception& e) {
    send(422, "invalid_argument", e.what());
  } catch (const std::exception& e) {
    send(500, "internal", e.what());
  }
}

}  // namespace

struct Service::Impl {
  explicit Impl(fs::path root) : cache_root(std::move(root)), cache(cache_root) {}

  fs::path cache_root;
  Cache cache;
  std::mutex sessions_m;
  std::map<std::string, std::shared_ptr<Slot>> sessions;
  std::mutex jobs_m;
  std::map<std::string, std::shared_ptr<Job>> jobs;
  std::uint64_t next_job = 1;
  std::mutex workers_m;
  std::vector<std::thread> workers;
  httplib::Server server;
  std::thread server_thread;

  std::shared_ptr<Slot> slot(const std::string& hash) {
    if (!digest_from_hex(hash)) throw Error(ErrorKind::not_found, "unknown session");
    std::lock_guard lock(sessions_m);
    if (auto it = sessions.find(hash); it != sessions.end()) return it->second;
    std::optional<Session> loaded = cache.load(hash);
    if (!loaded) throw Error(ErrorKind::not_found, "unknown session " + hash);
    auto s = std::make_shared<Slot>();
    s->session = std::move(*loaded);
    sessions[hash] = s;
    return s;
  }

  template <class F>
  json read(const std::string& hash, F&& fn) {
    auto s = slot(hash);
    std::shared_lock lock(s->data);
    return fn(static_cast<const Session&>(s->session));
  }

  /// Synchronous mutation in place, persisted afterwards.
  template <class F>
  json mutate(const std::string& hash, F&& fn) {
    auto s = slot(hash);
    WriterGuard guard(s);
    std::unique_lock lock(s->data);
    json out = fn(s->session);
    cache.save(s->session);
    return out;
  }

  /// Runs `fn` on a copy of the session in a worker thread; the copy replaces the session on success.
  json start_job(const std::string& hash, const std::string& kind,
                 std::function<json(Session&, const ProgressFn&)> fn) {
    auto s = slot(hash);
    auto guard = std::make_shared<WriterGuard>(s);
    auto job = std::make_shared<Job>();
    {
      std::lock_guard lock(jobs_m);
      job->id = std::to_string(next_job++);
      job->kind = kind;
      jobs[job->id] = job;
    }
    std::lock_guard wl(workers_m);
    workers.emplace_back([this, s, guard, job, fn = std::move(fn)]() mutable {
      set_job(*job, [](Job& j) { j.state = "running"; });
      json result;
      json error;
      try {
        Session copy;
        {
          std::shared_lock lock(s->data);
          copy = s->session;
        }
        const ProgressFn progress = [&](double p) { set_job(*job, [p](Job& j) { j.progress = p; }); };
        result = fn(copy, progress);
        std::unique_lock lock(s->data);
        s->session = std::move(copy);
        cache.save(s->session);
      } catch (const Error& e) {
        error = {{"kind", to_string(e.kind())}, {"message", e.what()}};
      } catch (const std::exception& e) {
        error = {{"kind", "internal"}, {"message", e.what()}};
      }
      // Release the writer right before publishing the outcome so a poller that sees "done" can mutate.
      guard.reset();
      set_job(*job, [&](Job& j) {
        if (error.is_null()) {
          j.result = std::move(result);
          j.progress = 1.0;
          j.state = "done";
        } else {
          j.error = std::move(error);
          j.state = "failed";
        }
      });
    });
    return {{"job", job->id}, {"state", "pending"}};
  }

  template <class F>
  void set_job(Job& job, F&& fn) {
    std::lock_guard lock(jobs_m);
    fn(job);
  }

  json job_json(const std::string& id) {
    std::lock_guard lock(jobs_m);
    auto it = jobs.find(id);
    if (it == jobs.end()) throw Error(ErrorKind::not_found, "unknown job " + id);
    const Job& j = *it->second;
    json out{{"id", j.id}, {"kind", j.kind}, {"state", j.state}, {"progress", j.progress}};
    if (j.state == "done") out["result"] = j.result;
    if (j.state == "failed") out["error"] = j.error;
    return out;
  }

  json create_session(const httplib::Request& req) {
    Session fresh;
    const std::string type = req.get_header_value("Content-Type");
    if (type.rfind("application/json", 0) == 0) {
      const PipelineConfig cfg = config_from_json({{"input", parse_body(req)}}, fs::current_path());
      fresh = open_session(cfg);
    } else {
      if (req.body.size() < 8) throw Error(ErrorKind::invalid_argument, "upload body is not an image");
      const bool png = req.body.compare(0, 4, "\x89PNG") == 0;
      const bool tiff = req.body.compare(0, 4, "II*\0", 4) == 0 || req.body.compare(0, 4, "MM\0*", 4) == 0;
      if (!png && !tiff) throw Error(ErrorKind::invalid_argument, "upload must be PNG or TIFF");
      const auto digest = sha256({reinterpret_cast<const std::uint8_t*>(req.body.data()), req.body.size()});
      const fs::path dir = cache_root / "uploads";
      fs::create_directories(dir);
      const fs::path file = dir / (to_hex(digest) + (png ? ".png" : ".tiff"));
      write_file_atomic(file, req.body);
      ImageStack image = load_stack(file);
      if (req.has_param("pixel_scale")) {
        const auto v = parse_number(req.get_param_value("pixel_scale"));
        if (!v || !(*v > 0.0)) throw Error(ErrorKind::invalid_argument, "pixel_scale must be > 0");
        image.pixel_scale = *v;
      }
      fresh = make_session(std::move(image));
    }
    const std::string hash = fresh.hash_hex();
    std::lock_guard lock(sessions_m);
    std::shared_ptr<Slot> existing;
    if (auto it = sessions.find(hash); it != sessions.end()) existing = it->second;
    else if (auto loaded = cache.load(hash)) {
      existing = std::make_shared<Slot>();
      existing->session = std::move(*loaded);
      sessions[hash] = existing;
    }
    if (existing) {
      std::shared_lock data(existing->data);
      const auto& old = existing->session.signals;
      const bool same = old.size() == fresh.signals.size() &&
                        std::equal(old.begin(), old.end(), fresh.signals.begin(), [](const auto& a, const auto& b) {
                          return a.name == b.name && a.stack.content_hash == b.stack.content_hash;
                        });
      if (!same) throw Error(ErrorKind::conflict, "a session for this image exists with different signal channels");
      json out = session_summary(existing->session);
      out["created"] = false;
      return out;
    }
    auto s = std::make_shared<Slot>();
    s->session = std::move(fresh);
    cache.save(s->session);
    sessions[hash] = s;
    json out = session_summary(s->session);
    out["created"] = true;
    return out;
  }

  void routes();
};

void Service::Impl::routes() {
  using Req = const httplib::Request&;
  using Res = httplib::Response&;
  auto handle = [](auto&& body) {
    return [body](Req req, Res res) {
      try {
        auto [status, payload] = body(req);
        res.status = status;
        res.set_content(payload.dump(), "application/json");
      } catch (...) {
        respond_error(res);
      }
    };
  };
  using Out = std::pair<int, json>;
  const std::string S = R"(/v1/sessions/([^/]+))";

  auto health = handle([](Req) { return Out{200, {{"status", "ok"}, {"api", "v1"}}}; });
  server.Get("/healthz", health);
  server.Get("/v1/healthz", health);

  server.Post("/v1/sessions", handle([this](Req req) { return Out{201, create_session(req)}; }));

  server.Get(S, handle([this](Req req) {
    return Out{200, read(req.matches[1], [&](const Session& s) {
                 if (req.get_param_value("view") == "state") return json{{"state", session_state_to_json(s)}};
                 return session_summary(s);
               })};
  }));

  server.Post(S + "/detect", handle([this](Req req) {
    const DetectStageConfig cfg = detect_config_from_json(parse_body(req));
    return Out{202, start_job(req.matches[1], "detect", [cfg](Session& s, const ProgressFn& p) {
                 json out = report_json(stage_detect(s, cfg, p));
                 json dets = json::array();
                 for (const auto& [id, r] : s.detections) dets.push_back(detection_to_json(r));
                 out["detections"] = std::move(dets);
                 return out;
               })};
  }));
  server.Post(S + "/segment", handle([this](Req req) {
    const SegmentStageConfig cfg = segment_config_from_json(parse_body(req));
    return Out{202, start_job(req.matches[1], "segment", [cfg](Session& s, const ProgressFn& p) {
                 return report_json(stage_segment(s, cfg, p));
               })};
  }));
  server.Post(S + "/train", handle([this](Req req) {
    const TrainRequest tr = train_request_from_json(parse_body(req));
    return Out{202, start_job(req.matches[1], "train",
                              [tr](Session& s, const ProgressFn&) { return report_json(stage_train(s, tr)); })};
  }));
  server.Post(S + "/filter", handle([this](Req req) {
    const FilterConfig cfg = filter_config_from_json(parse_body(req));
    return Out{200, mutate(req.matches[1], [&](Session& s) { return report_json(stage_filter(s, cfg)); })};
  }));
  server.Post(S + "/track", handle([this](Req req) {
    const TrackingConfig cfg = tracking_config_from_json(parse_body(req));
    return Out{200, mutate(req.matches[1], [&](Session& s) { return report_json(stage_track(s, cfg)); })};
  }));
  server.Post(S + "/features", handle([this](Req req) {
    return Out{200, mutate(req.matches[1], [&](Session& s) { return report_json(stage_features(s)); })};
  }));
  server.Post(S + "/predict", handle([this](Req req) {
    const json body = parse_body(req);
    const std::string model = body.at("model").get<std::string>();
    return Out{200, mutate(req.matches[1], [&](Session& s) { return report_json(stage_predict(s, model)); })};
  }));

  server.Get(S + "/detections", handle([this](Req req) {
    const bool all = req.get_param_value("all") == "1";
    return Out{200, read(req.matches[1], [&](const Session& s) {
                 json out = json::array();
                 for (const auto& [id, r] : s.detections) {
                   const bool visible = s.filter.accepts(r);
                   if (!all && !visible) continue;
                   json j = detection_to_json(r);
                   j["visible"] = visible;
                   out.push_back(std::move(j));
                 }
                 return json{{"detections", std::move(out)}};
               })};
  }));
  server.Post(S + "/detections", handle([this](Req req) {
    const json body = parse_body(req);
    const Rect bbox = bbox_from(body.at("bbox"));
    const int frame = body.value("frame", 0);
    return Out{201, mutate(req.matches[1], [&](Session& s) {
                 const DetectionId id = add_detection(s, frame, bbox);
                 return record_detail(s, id);
               })};
  }));
  server.Get(S + R"(/detections/([^/]+))", handle([this](Req req) {
    const DetectionId id = parse_id(req.matches[2]);
    return Out{200, read(req.matches[1], [&](const Session& s) { return record_detail(s, id); })};
  }));
  server.Put(S + R"(/detections/([^/]+))", handle([this](Req req) {
    const DetectionId id = parse_id(req.matches[2]);
    const json body = parse_body(req);
    const Rect bbox = bbox_from(body.at("bbox"));
    return Out{200, mutate(req.matches[1], [&](Session& s) {
                 modify_detection(s, id, bbox);
                 return record_detail(s, id);
               })};
  }));
  server.Delete(S + R"(/detections/([^/]+))", handle([this](Req req) {
    const DetectionId id = parse_id(req.matches[2]);
    return Out{200, mutate(req.matches[1], [&](Session& s) {
                 delete_detection(s, id);
                 return json{{"deleted", id}};
               })};
  }));

  server.Post(S + "/annotation-sessions", handle([this](Req req) {
    const json body = parse_body(req);
    return Out{201, mutate(req.matches[1], [&](Session& s) {
                 AnnotationSession sess;
                 sess.name = body.at("name").get<std::string>();
                 validate_entry_name(sess.name);
                 sess.kind = annotation_kind_from_string(body.at("kind").get<std::string>());
                 if (body.contains("target_ids")) {
                   for (const auto& v : body["target_ids"]) {
                     const auto id = v.get<DetectionId>();
                     if (!s.detections.contains(id))
                       throw Error(ErrorKind::invalid_argument, "target id " + std::to_string(id) + " does not exist");
                     sess.target_ids.push_back(id);
                   }
                 } else {
                   for (const auto& r : s.visible()) sess.target_ids.push_back(r.detection_id);
                 }
                 if (body.contains("vocabulary")) sess.vocabulary = body["vocabulary"].get<std::set<std::string>>();
                 if (sess.kind == AnnotationKind::classes && !sess.vocabulary)
                   throw Error(ErrorKind::invalid_argument, "classes sessions need a vocabulary");
                 advance_cursor(sess, s.annotations);
                 s.annotation_sessions[sess.name] = sess;
                 return session_to_json(sess);
               })};
  }));
  server.Get(S + R"(/annotation-sessions/([^/]+))", handle([this](Req req) {
    const std::string name = req.matches[2];
    return Out{200, read(req.matches[1], [&](const Session& s) {
                 auto it = s.annotation_sessions.find(name);
                 if (it == s.annotation_sessions.end()) throw Error(ErrorKind::not_found, "unknown annotation session");
                 return session_to_json(it->second);
               })};
  }));
  server.Post(S + R"(/annotation-sessions/([^/]+)/suspend)", handle([this](Req req) {
    const std::string hash = req.matches[1];
    const std::string name = req.matches[2];
    return Out{200, read(hash, [&](const Session& s) {
                 auto it = s.annotation_sessions.find(name);
                 if (it == s.annotation_sessions.end()) throw Error(ErrorKind::not_found, "unknown annotation session");
                 cache.suspend(hash, it->second, s.annotations);
                 return session_to_json(it->second);
               })};
  }));
  server.Post(S + R"(/annotation-sessions/([^/]+)/resume)", handle([this](Req req) {
    const std::string hash = req.matches[1];
    const std::string name = req.matches[2];
    return Out{200, mutate(hash, [&](Session& s) {
                 AnnotationBook restored;
                 AnnotationSession sess = cache.resume(hash, name, restored);
                 for (const auto& [key, a] : restored.entries())
                   if (s.detections.contains(key.detection_id)) s.annotations.put(a);
                 const std::size_t before = sess.target_ids.size();
                 std::erase_if(sess.target_ids, [&](DetectionId id) { return !s.detections.contains(id); });
                 if (sess.target_ids.size() != before) advance_cursor(sess, s.annotations);
                 s.annotation_sessions[name] = sess;
                 return session_to_json(sess);
               })};
  }));
  server.Post(S + "/annotations", handle([this](Req req) {
    const json body = parse_body(req);
    return Out{200, mutate(req.matches[1], [&](Session& s) {
                 const std::string name = body.at("session").get<std::string>();
                 auto it = s.annotation_sessions.find(name);
                 if (it == s.annotation_sessions.end()) throw Error(ErrorKind::not_found, "unknown annotation session");
                 AnnotationSession sess = it->second;
                 AnnotateContext ctx{s.image.width(), s.image.height(), s.image.pixel_scale,
                                     body.value("author", std::string("api")), body.value("timestamp", utc_now())};
                 annotate(sess, s.annotations, s.features, body.at("detection_id").get<DetectionId>(),
                          parse_payload(sess.kind, body.at("payload")), ctx);
                 it->second = sess;
                 return session_to_json(sess);
               })};
  }));

  server.Get(S + R"(/models/([^/]+))", [this](Req req, Res res) {
    try {
      const std::string name = req.matches[2];
      validate_entry_name(name);
      auto s = slot(req.matches[1]);
      std::shared_lock lock(s->data);
      auto it = s->session.models.find(name);
      if (it == s->session.models.end()) throw Error(ErrorKind::not_found, "unknown model");
      res.set_content(std::string(it->second.begin(), it->second.end()), "application/octet-stream");
    } catch (...) {
      respond_error(res);
    }
  });
  server.Put(S + R"(/models/([^/]+))", handle([this](Req req) {
    const std::string name = req.matches[2];
    validate_entry_name(name);
    const std::vector<std::uint8_t> bytes(req.body.begin(), req.body.end());
    const ml::TrainedModel model = ml::import_model(bytes);
    return Out{200, mutate(req.matches[1], [&](Session& s) {
                 s.models[name] = bytes;
                 return json{{"model", name}, {"architecture", ml::to_string(model.spec.architecture)},
                             {"schema", model.schema}, {"classes", model.vocabulary}};
               })};
  }));

  server.Get(S + "/export", [this](Req req, Res res) {
    try {
      const std::string format = req.has_param("format") ? req.get_param_value("format") : "json";
      auto s = slot(req.matches[1]);
      std::shared_lock lock(s->data);
      if (format == "csv") {
        res.set_content(export_csv(s->session), "text/csv");
      } else if (format == "json") {
        std::vector<DetectionId> ids;
        const bool all = !req.has_param("ids");
        if (!all) {
          std::stringstream ss(req.get_param_value("ids"));
          for (std::string part; std::getline(ss, part, ',');)
            if (!part.empty()) ids.push_back(parse_id(part));
        }
        res.set_content(export_json(s->session, ids, all).dump(), "application/json");
      } else if (format == "npy") {
        const auto frame = parse_number(req.has_param("frame") ? req.get_param_value("frame") : "0");
        if (!frame || *frame != std::floor(*frame)) throw Error(ErrorKind::invalid_argument, "frame must be an integer");
        const auto bytes = export_npy(s->session, static_cast<int>(*frame));
        res.set_content(std::string(bytes.begin(), bytes.end()), "application/octet-stream");
      } else {
        throw Error(ErrorKind::invalid_argument, "format must be csv, json or npy");
      }
    } catch (...) {
      respond_error(res);
    }
  });
  server.Post(S + "/import", handle([this](Req req) {
    const json doc = parse_body(req);
    return Out{200, mutate(req.matches[1], [&](Session& s) {
                 const ImportReport r = import_json(s, doc);
                 json ids = json::object();
                 for (const auto& [from, to] : r.id_map) ids[std::to_string(from)] = to;
                 return json{{"warnings", r.warnings}, {"id_map", std::move(ids)}};
               })};
  }));

  server.Get(R"(/v1/jobs/([^/]+))", handle([this](Req req) { return Out{200, job_json(req.matches[1])}; }));
}

Service::Service(fs::path cache_root) : impl_(std::make_unique<Impl>(std::move(cache_root))) {
  fs::create_directories(impl_->cache_root);
  impl_->routes();
}

Service::~Service() { stop(); }

int Service::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) bound = impl_->server.bind_to_any_port(host);
  else if (!impl_->server.bind_to_port(host, port)) bound = -1;
  if (bound < 0) throw Error(ErrorKind::io, "cannot bind " + host + ":" + std::to_string(port));
  impl_->server_thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void Service::run(const std::string& host, int port) {
  if (!impl_->server.listen(host, port)) throw Error(ErrorKind::io, "cannot listen on " + host + ":" + std::to_string(port));
}

void Service::stop() {
  impl_->server.stop();
  if (impl_->server_thread.joinable()) impl_->server_thread.join();
  std::vector<std::thread> workers;
  {
    std::lock_guard lock(impl_->workers_m);
    workers.swap(impl_->workers);
  }
  for (auto& t : workers) t.join();
}

}  // namespace orgapipe
