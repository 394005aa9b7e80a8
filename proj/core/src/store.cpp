#include "orgapipe/store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "orgapipe/error.hpp"

namespace orgapipe {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------------------------
// Session basics and edits

std::vector<DetectionRecord> Session::visible() const {
  std::vector<DetectionRecord> out;
  for (const auto& [id, r] : detections)
    if (filter.accepts(r)) out.push_back(r);
  return out;
}

std::vector<std::vector<DetectionRecord>> Session::visible_by_frame() const {
  std::vector<std::vector<DetectionRecord>> frames(image.frame_count());
  for (const auto& r : visible())
    if (r.frame_index >= 0 && static_cast<std::size_t>(r.frame_index) < frames.size())
      frames[static_cast<std::size_t>(r.frame_index)].push_back(r);
  return frames;
}

const DetectionRecord& Session::record(DetectionId id) const {
  auto it = detections.find(id);
  if (it == detections.end()) throw Error(ErrorKind::not_found, "unknown detection id " + std::to_string(id));
  return it->second;
}

Session make_session(ImageStack image, std::vector<SignalChannel> signals) {
  if (image.frames.empty()) throw Error(ErrorKind::invalid_argument, "image stack has no frames");
  std::set<std::string> names{kPrimaryChannel};
  for (const auto& ch : signals) {
    if (ch.stack.width() != image.width() || ch.stack.height() != image.height() ||
        ch.stack.frame_count() != image.frame_count())
      throw Error(ErrorKind::invalid_argument, "signal channel '" + ch.name + "' does not match the image");
    if (ch.name.empty() || !names.insert(ch.name).second)
      throw Error(ErrorKind::invalid_argument, "signal channel names must be unique, non-empty and not 'primary'");
  }
  Session s;
  s.image = std::move(image);
  s.signals = std::move(signals);
  return s;
}

std::vector<std::string> integrity_violations(const Session& s) {
  std::vector<std::string> v;
  auto live = [&](DetectionId id) { return s.detections.contains(id); };
  for (const auto& [key, mask] : s.masks)
    if (!live(key.detection_id)) v.push_back("mask of dead detection " + std::to_string(key.detection_id));
  for (const auto& [id, row] : s.features.rows())
    if (!live(id)) v.push_back("feature row of dead detection " + std::to_string(id));
  for (const auto& [id, flags] : s.features.flags())
    if (!live(id)) v.push_back("feature flags of dead detection " + std::to_string(id));
  for (const auto& [key, a] : s.annotations.entries())
    if (!live(key.detection_id)) v.push_back("annotation of dead detection " + std::to_string(key.detection_id));
  for (const auto& [id, track] : s.tracks.track_of) {
    if (!live(id)) v.push_back("track entry of dead detection " + std::to_string(id));
    else if (s.detections.at(id).track_id != track) v.push_back("track id mismatch on " + std::to_string(id));
  }
  for (const auto& [track, entries] : s.tracks.tracks) {
    if (entries.empty()) v.push_back("empty track " + std::to_string(track));
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (!live(entries[i].detection_id)) v.push_back("track " + std::to_string(track) + " lists dead detection");
      if (i && entries[i].frame_index <= entries[i - 1].frame_index)
        v.push_back("track " + std::to_string(track) + " frames not increasing");
    }
  }
  for (const auto& [id, r] : s.detections) {
    if (id >= s.next_detection_id) v.push_back("id counter not ahead of " + std::to_string(id));
    if (r.track_id && !s.tracks.track_of.contains(id)) v.push_back("dangling track id on " + std::to_string(id));
  }
  for (const auto& [name, sess] : s.annotation_sessions)
    for (DetectionId id : sess.target_ids)
      if (!live(id)) v.push_back("annotation session '" + name + "' targets dead detection");
  return v;
}

namespace {

void check_bbox(const Session& s, int frame_index, const Rect& bbox) {
  if (frame_index < 0 || static_cast<std::size_t>(frame_index) >= s.image.frame_count())
    throw Error(ErrorKind::invalid_argument, "frame index out of range");
  if (!std::isfinite(bbox.x_min) || !std::isfinite(bbox.y_min) || !std::isfinite(bbox.x_max) ||
      !std::isfinite(bbox.y_max) || !bbox.within(s.image.width(), s.image.height()))
    throw Error(ErrorKind::invalid_argument, "bbox is empty or outside the frame");
}

void drop_masks(Session& s, DetectionId id) {
  std::erase_if(s.masks, [id](const auto& e) { return e.first.detection_id == id; });
}

void drop_track_entry(Session& s, DetectionId id) {
  auto it = s.tracks.track_of.find(id);
  if (it == s.tracks.track_of.end()) return;
  const TrackId track = it->second;
  s.tracks.track_of.erase(it);
  auto& entries = s.tracks.tracks[track];
  std::erase_if(entries, [id](const TrackEntry& e) { return e.detection_id == id; });
  if (entries.empty()) s.tracks.tracks.erase(track);
}

}  // namespace

DetectionId add_detection(Session& s, int frame_index, const Rect& bbox) {
  check_bbox(s, frame_index, bbox);
  DetectionRecord r;
  r.detection_id = s.next_detection_id++;
  r.frame_index = frame_index;
  r.bbox = bbox;
  r.confidence = 1.0;
  r.provenance = Provenance::manual;
  s.detections[r.detection_id] = r;
  return r.detection_id;
}

void modify_detection(Session& s, DetectionId id, const Rect& bbox) {
  DetectionRecord& r = const_cast<DetectionRecord&>(s.record(id));
  check_bbox(s, r.frame_index, bbox);
  r.bbox = bbox;
  drop_masks(s, id);
  s.features.erase_kinds(id, {ColumnKind::geometric, ColumnKind::intensity, ColumnKind::regionprops});
  s.features.clear_flags(id);
}

void delete_detection(Session& s, DetectionId id) {
  s.record(id);
  s.detections.erase(id);
  drop_masks(s, id);
  s.features.erase_row(id);
  s.annotations.erase_detection(id);
  drop_track_entry(s, id);
  for (auto& [name, sess] : s.annotation_sessions) {
    std::erase(sess.target_ids, id);
    advance_cursor(sess, s.annotations);
  }
}

void clear_detections(Session& s) {
  s.detections.clear();
  s.tracks = {};
  s.masks.clear();
  s.features = {};
  s.annotations = {};
  s.annotation_sessions.clear();
}

// ---------------------------------------------------------------------------------------------
// JSON

namespace {

json rect_json(const Rect& r) { return json::array({r.x_min, r.y_min, r.x_max, r.y_max}); }

Rect rect_from(const json& j) {
  if (!j.is_array() || j.size() != 4) throw Error(ErrorKind::invalid_argument, "rect must be [x0, y0, x1, y1]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

json polygon_json(const Polygon& p) {
  json out = json::array();
  for (const Point& q : p) out.push_back({q.x, q.y});
  return out;
}

Polygon polygon_from(const json& j) {
  Polygon p;
  for (const auto& q : j) p.push_back({q.at(0).get<double>(), q.at(1).get<double>()});
  return p;
}

json column_json(const Column& c) {
  return {{"name", c.name}, {"kind", to_string(c.kind)}, {"channel", c.channel}, {"labels", c.labels}};
}

Column column_from(const json& j) {
  return {j.at("name").get<std::string>(), column_kind_from_string(j.at("kind").get<std::string>()),
          j.value("channel", ""), j.value("labels", std::vector<std::string>{})};
}

json stack_json(const ImageStack& st) {
  return {{"hash", to_hex(st.content_hash)},
          {"source_path", st.source_path},
          {"pixel_scale", st.pixel_scale ? json(*st.pixel_scale) : json(nullptr)},
          {"frames", st.frame_count()},
          {"height", st.height()},
          {"width", st.width()},
          {"channels", st.channels()}};
}

void rebuild_track(Session& s, DetectionId id, TrackId track, int frame, bool synthetic) {
  auto& entries = s.tracks.tracks[track];
  auto pos = std::lower_bound(entries.begin(), entries.end(), frame,
                              [](const TrackEntry& e, int f) { return e.frame_index < f; });
  entries.insert(pos, {frame, id, synthetic});
  s.tracks.track_of[id] = track;
}

}  // namespace

json detection_to_json(const DetectionRecord& r) {
  return {{"detection_id", r.detection_id},
          {"frame", r.frame_index},
          {"bbox", rect_json(r.bbox)},
          {"confidence", r.confidence},
          {"provenance", to_string(r.provenance)},
          {"track_id", r.track_id ? json(*r.track_id) : json(nullptr)}};
}

DetectionRecord detection_from_json(const json& j) {
  DetectionRecord r;
  r.detection_id = j.at("detection_id").get<DetectionId>();
  r.frame_index = j.at("frame").get<int>();
  r.bbox = rect_from(j.at("bbox"));
  r.confidence = j.at("confidence").get<double>();
  r.provenance = provenance_from_string(j.at("provenance").get<std::string>());
  if (j.contains("track_id") && !j["track_id"].is_null()) r.track_id = j["track_id"].get<TrackId>();
  return r;
}

json session_state_to_json(const Session& s) {
  json j;
  j["image"] = stack_json(s.image);
  j["signals"] = json::array();
  for (const auto& ch : s.signals) {
    json e = stack_json(ch.stack);
    e["name"] = ch.name;
    j["signals"].push_back(std::move(e));
  }
  j["next_detection_id"] = s.next_detection_id;
  j["filter"] = {{"min_confidence", s.filter.min_confidence}, {"min_diameter", s.filter.min_diameter}};
  j["detections"] = json::array();
  for (const auto& [id, r] : s.detections) j["detections"].push_back(detection_to_json(r));
  j["tracks"] = json::array();
  for (const auto& [track, entries] : s.tracks.tracks) {
    json e = json::array();
    for (const auto& t : entries) e.push_back({t.frame_index, t.detection_id, t.synthetic});
    j["tracks"].push_back({{"track_id", track}, {"entries", std::move(e)}});
  }
  j["masks"] = json::array();
  for (const auto& [key, m] : s.masks)
    j["masks"].push_back({{"detection_id", m.detection_id},
                          {"channel", m.channel_name},
                          {"frame", m.frame_index},
                          {"vertices", polygon_json(m.vertices)}});
  json cols = json::array();
  for (const auto& c : s.features.columns()) cols.push_back(column_json(c));
  json rows = json::array();
  for (const auto& [id, values] : s.features.rows()) rows.push_back({{"detection_id", id}, {"values", values}});
  json flags = json::array();
  for (const auto& [id, f] : s.features.flags()) flags.push_back({{"detection_id", id}, {"flags", f}});
  j["features"] = {{"columns", std::move(cols)}, {"rows", std::move(rows)}, {"flags", std::move(flags)}};
  j["annotations"] = json::array();
  for (const auto& [key, a] : s.annotations.entries()) j["annotations"].push_back(annotation_to_json(a));
  j["annotation_sessions"] = json::array();
  for (const auto& [name, sess] : s.annotation_sessions) j["annotation_sessions"].push_back(session_to_json(sess));
  return j;
}

void session_state_from_json(Session& s, const json& j) {
  if (j.at("image").at("hash").get<std::string>() != s.hash_hex())
    throw Error(ErrorKind::format, "snapshot belongs to a different image");
  const auto& sig = j.at("signals");
  if (sig.size() != s.signals.size()) throw Error(ErrorKind::format, "snapshot signal channels differ");
  for (std::size_t i = 0; i < sig.size(); ++i)
    if (sig[i].at("name").get<std::string>() != s.signals[i].name ||
        sig[i].at("hash").get<std::string>() != to_hex(s.signals[i].stack.content_hash))
      throw Error(ErrorKind::format, "snapshot signal channels differ");

  s.next_detection_id = j.at("next_detection_id").get<DetectionId>();
  s.filter.min_confidence = j.at("filter").at("min_confidence").get<double>();
  s.filter.min_diameter = j.at("filter").at("min_diameter").get<double>();
  s.detections.clear();
  for (const auto& d : j.at("detections")) {
    DetectionRecord r = detection_from_json(d);
    s.detections[r.detection_id] = r;
  }
  s.tracks = {};
  for (const auto& t : j.at("tracks")) {
    const TrackId track = t.at("track_id").get<TrackId>();
    auto& entries = s.tracks.tracks[track];
    for (const auto& e : t.at("entries")) {
      entries.push_back({e.at(0).get<int>(), e.at(1).get<DetectionId>(), e.at(2).get<bool>()});
      s.tracks.track_of[entries.back().detection_id] = track;
    }
  }
  s.masks.clear();
  for (const auto& m : j.at("masks")) {
    PolygonMask pm;
    pm.detection_id = m.at("detection_id").get<DetectionId>();
    pm.channel_name = m.at("channel").get<std::string>();
    pm.frame_index = m.at("frame").get<int>();
    pm.vertices = polygon_from(m.at("vertices"));
    s.masks[{pm.detection_id, pm.channel_name}] = std::move(pm);
  }
  s.features = {};
  const auto& f = j.at("features");
  for (const auto& c : f.at("columns")) s.features.ensure_column(column_from(c));
  for (const auto& row : f.at("rows")) {
    const DetectionId id = row.at("detection_id").get<DetectionId>();
    for (const auto& [col, value] : row.at("values").items()) s.features.set(id, col, value.get<double>());
  }
  for (const auto& row : f.at("flags")) {
    const DetectionId id = row.at("detection_id").get<DetectionId>();
    for (const auto& flag : row.at("flags")) s.features.add_flag(id, flag.get<std::string>());
  }
  s.annotations = {};
  for (const auto& a : j.at("annotations")) s.annotations.put(annotation_from_json(a));
  s.annotation_sessions.clear();
  for (const auto& a : j.at("annotation_sessions")) {
    AnnotationSession sess = annotation_session_from_json(a);
    s.annotation_sessions[sess.name] = std::move(sess);
  }
}

// ---------------------------------------------------------------------------------------------
// Subset export / import

json export_json(const Session& s, const std::vector<DetectionId>& ids, bool all) {
  std::vector<DetectionId> chosen;
  if (all) {
    for (const auto& [id, r] : s.detections) chosen.push_back(id);
  } else {
    std::set<DetectionId> uniq(ids.begin(), ids.end());
    for (DetectionId id : uniq) {
      if (!s.detections.contains(id)) throw Error(ErrorKind::not_found, "unknown detection id " + std::to_string(id));
      chosen.push_back(id);
    }
  }
  std::set<std::string> used_columns;
  json records = json::array();
  for (DetectionId id : chosen) {
    json rec = detection_to_json(s.detections.at(id));
    json masks = json::object();
    for (const auto& [key, m] : s.masks)
      if (key.detection_id == id) masks[key.channel] = polygon_json(m.vertices);
    rec["masks"] = std::move(masks);
    json feats = json::object();
    if (auto it = s.features.rows().find(id); it != s.features.rows().end())
      for (const auto& [col, v] : it->second) {
        feats[col] = v;
        used_columns.insert(col);
      }
    rec["features"] = std::move(feats);
    json anns = json::array();
    for (const auto& a : s.annotations.for_detection(id)) {
      json aj = annotation_to_json(a);
      aj.erase("detection_id");
      anns.push_back(std::move(aj));
    }
    rec["annotations"] = std::move(anns);
    records.push_back(std::move(rec));
  }
  json cols = json::array();
  for (const auto& c : s.features.columns())
    if (used_columns.contains(c.name)) cols.push_back(column_json(c));
  return {{"version", 1}, {"image_hash", s.hash_hex()}, {"feature_columns", std::move(cols)},
          {"records", std::move(records)}};
}

ImportReport import_json(Session& s, const json& doc) {
  ImportReport report;
  if (!doc.is_object() || doc.value("version", 0) != 1)
    throw Error(ErrorKind::version, "unsupported export document version");
  const bool same_image = doc.at("image_hash").get<std::string>() == s.hash_hex();
  if (!same_image) report.warnings.push_back("image hash differs from the session; detection ids were remapped");

  std::vector<DetectionRecord> records;
  for (const auto& rj : doc.at("records")) {
    DetectionRecord r = detection_from_json(rj);
    check_bbox(s, r.frame_index, r.bbox);
    if (!(r.confidence >= 0.0 && r.confidence <= 1.0))
      throw Error(ErrorKind::invalid_argument, "confidence outside [0, 1]");
    records.push_back(r);
  }
  std::set<std::string> channels{kPrimaryChannel};
  for (const auto& ch : s.signals) channels.insert(ch.name);
  std::map<std::string, Column> columns;
  std::vector<Column> column_order;
  for (const auto& cj : doc.at("feature_columns")) {
    Column c = column_from(cj);
    columns[c.name] = c;
    column_order.push_back(c);
  }
  // Register in document order so the exporter's registry order survives the round trip.
  for (const Column& c : column_order)
    if (!s.features.column(c.name)) s.features.ensure_column(c);

  for (std::size_t i = 0; i < records.size(); ++i) {
    DetectionRecord r = records[i];
    const auto& rj = doc["records"][i];
    const DetectionId original = r.detection_id;
    const bool remap = !same_image || original == 0 || s.detections.contains(original);
    if (remap && same_image) report.warnings.push_back("detection id " + std::to_string(original) + " remapped");
    if (remap) {
      r.detection_id = s.next_detection_id++;
      r.track_id.reset();
    } else {
      s.next_detection_id = std::max(s.next_detection_id, original + 1);
    }
    const DetectionId id = r.detection_id;
    report.id_map[original] = id;
    if (r.track_id) {
      const auto& entries = s.tracks.tracks[*r.track_id];
      const bool clash = std::any_of(entries.begin(), entries.end(),
                                     [&](const TrackEntry& e) { return e.frame_index == r.frame_index; });
      if (clash) {
        report.warnings.push_back("track id of detection " + std::to_string(original) + " dropped");
        if (entries.empty()) s.tracks.tracks.erase(*r.track_id);
        r.track_id.reset();
      } else {
        rebuild_track(s, id, *r.track_id, r.frame_index, r.provenance == Provenance::gap_fill);
      }
    }
    s.detections[id] = r;

    for (const auto& [channel, verts] : rj.at("masks").items()) {
      if (!channels.contains(channel)) {
        report.warnings.push_back("mask for unknown channel '" + channel + "' skipped");
        continue;
      }
      PolygonMask pm;
      pm.detection_id = id;
      pm.frame_index = r.frame_index;
      pm.channel_name = channel;
      pm.vertices = polygon_from(verts);
      s.masks[{id, channel}] = std::move(pm);
    }
    for (const auto& [col, value] : rj.at("features").items()) {
      auto it = columns.find(col);
      s.features.ensure_column(it != columns.end() ? it->second : Column{col, ColumnKind::geometric, {}, {}});
      s.features.set(id, col, value.get<double>());
    }
    for (auto aj : rj.at("annotations")) {
      aj["detection_id"] = id;
      s.annotations.put(annotation_from_json(aj));
    }
  }
  return report;
}

// ---------------------------------------------------------------------------------------------
// CSV / NPY

TabularData session_table(const Session& s) {
  TabularData t;
  t.columns = {"detection_id", "frame", "track_id", "x_min", "y_min", "x_max", "y_max", "confidence", "provenance"};
  for (const auto& c : s.features.columns()) t.columns.push_back(c.name);
  const auto ann_cols = s.annotations.columns();
  for (const auto& [kind, name] : ann_cols) t.columns.push_back("ann:" + std::string(to_string(kind)) + ":" + name);

  for (const auto& r : s.visible()) {
    std::vector<Cell> row;
    row.emplace_back(std::to_string(r.detection_id));
    row.emplace_back(std::to_string(r.frame_index));
    row.emplace_back(r.track_id ? Cell{std::to_string(*r.track_id)} : Cell{});
    row.emplace_back(r.bbox.x_min);
    row.emplace_back(r.bbox.y_min);
    row.emplace_back(r.bbox.x_max);
    row.emplace_back(r.bbox.y_max);
    row.emplace_back(r.confidence);
    row.emplace_back(std::string(to_string(r.provenance)));
    for (const auto& c : s.features.columns()) {
      const auto v = s.features.get(r.detection_id, c.name);
      if (!v) row.emplace_back(std::monostate{});
      else if (!c.labels.empty() && *v >= 0 && *v < static_cast<double>(c.labels.size()) && *v == std::floor(*v))
        row.emplace_back(c.labels[static_cast<std::size_t>(*v)]);
      else row.emplace_back(*v);
    }
    for (const auto& [kind, name] : ann_cols) {
      const Annotation* a = s.annotations.find({r.detection_id, kind, name});
      if (!a) row.emplace_back(std::monostate{});
      else if (const auto* d = std::get_if<double>(&a->payload)) row.emplace_back(*d);
      else row.emplace_back(payload_to_cell(a->payload));
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::string export_csv(const Session& s) { return to_csv(session_table(s)); }

std::vector<std::uint8_t> export_npy(const Session& s, int frame_index) {
  if (frame_index < 0 || static_cast<std::size_t>(frame_index) >= s.image.frame_count())
    throw Error(ErrorKind::invalid_argument, "frame index out of range");
  const int h = s.image.height();
  const int w = s.image.width();
  std::vector<const PolygonMask*> masks;
  DetectionId max_id = 0;
  for (const auto& r : s.visible()) {
    if (r.frame_index != frame_index) continue;
    auto it = s.masks.find({r.detection_id, kPrimaryChannel});
    if (it == s.masks.end()) continue;
    masks.push_back(&it->second);
    max_id = std::max(max_id, r.detection_id);
  }
  if (max_id > 0xffffffffULL) throw Error(ErrorKind::invalid_argument, "detection id too large for a label image");
  std::vector<std::uint32_t> labels(static_cast<std::size_t>(h) * w, 0);
  // Descending id order: the lowest id is drawn last and wins overlaps.
  std::sort(masks.begin(), masks.end(),
            [](const PolygonMask* a, const PolygonMask* b) { return a->detection_id > b->detection_id; });
  for (const PolygonMask* m : masks) {
    const BinaryMask raster = rasterize_mask(m->vertices);
    for (int y = 0; y < raster.height; ++y)
      for (int x = 0; x < raster.width; ++x) {
        const int ix = x + raster.x0, iy = y + raster.y0;
        if (ix < 0 || iy < 0 || ix >= w || iy >= h || !raster.get(x, y)) continue;
        labels[static_cast<std::size_t>(iy) * w + ix] = static_cast<std::uint32_t>(m->detection_id);
      }
  }

  const bool wide = max_id > 0xffff;
  std::string header = std::string("{'descr': '") + (wide ? "<u4" : "<u2") +
                       "', 'fortran_order': False, 'shape': (" + std::to_string(h) + ", " + std::to_string(w) +
                       "), }";
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');

  std::vector<std::uint8_t> out{0x93, 'N', 'U', 'M', 'P', 'Y', 1, 0};
  out.push_back(static_cast<std::uint8_t>(header.size() & 0xff));
  out.push_back(static_cast<std::uint8_t>(header.size() >> 8));
  out.insert(out.end(), header.begin(), header.end());
  const int bytes = wide ? 4 : 2;
  out.reserve(out.size() + labels.size() * bytes);
  for (std::uint32_t v : labels)
    for (int b = 0; b < bytes; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  return out;
}

// ---------------------------------------------------------------------------------------------
// Files and cache

namespace {

std::atomic<unsigned> tmp_counter{0};

fs::path temp_path_for(const fs::path& target) {
  return target.parent_path() /
         (target.filename().string() + ".tmp-" + std::to_string(::getpid()) + "-" + std::to_string(tmp_counter++));
}

void write_raw(const fs::path& path, std::string_view bytes) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw Error(ErrorKind::io, "cannot write " + path.string());
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n < 0) {
      ::close(fd);
      throw Error(ErrorKind::io, "write failed: " + path.string());
    }
    done += static_cast<std::size_t>(n);
  }
  ::fsync(fd);
  ::close(fd);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string payload_digest(const json& payload) {
  const std::string text = payload.dump();
  return to_hex(sha256({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()}));
}

}  // namespace

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  const fs::path tmp = temp_path_for(path);
  write_raw(tmp, bytes);
  fs::rename(tmp, path);
}

void validate_entry_name(const std::string& name) {
  if (name.empty() || name.size() > 200 || name == "." || name == ".." ||
      name.find_first_of(std::string("/\\\0", 3)) != std::string::npos)
    throw Error(ErrorKind::invalid_argument, "invalid name '" + name + "'");
}

Cache::Cache(fs::path root) : root_(std::move(root)) {}

fs::path Cache::default_root() {
  if (const char* env = std::getenv("ORGAPIPE_CACHE"); env && *env) return env;
  if (const char* xdg = std::getenv("XDG_CACHE_HOME"); xdg && *xdg) return fs::path(xdg) / "orgapipe";
  if (const char* home = std::getenv("HOME"); home && *home) return fs::path(home) / ".cache" / "orgapipe";
  return fs::temp_directory_path() / "orgapipe-cache";
}

fs::path Cache::entry_dir(const std::string& hash) const {
  if (!digest_from_hex(hash)) throw Error(ErrorKind::invalid_argument, "invalid image hash '" + hash + "'");
  return root_ / hash;
}

void Cache::write(const fs::path& path, std::string_view bytes) const {
  const fs::path tmp = temp_path_for(path);
  write_raw(tmp, bytes);
  if (before_rename) before_rename(tmp, path);
  fs::rename(tmp, path);
}

bool Cache::contains(const std::string& hash) const { return fs::exists(entry_dir(hash) / "session.json"); }

namespace {

std::string signal_file(const SignalChannel& ch) { return "signal-" + to_hex(ch.stack.content_hash) + ".tiff"; }

void save_stack_once(const ImageStack& stack, const fs::path& target) {
  if (fs::exists(target)) return;
  const fs::path tmp = temp_path_for(target);
  save_tiff(stack, tmp);
  fs::rename(tmp, target);
}

ImageStack restore_stack(const fs::path& file, const json& meta) {
  ImageStack st = load_stack(file);
  if (to_hex(st.content_hash) != meta.at("hash").get<std::string>())
    throw Error(ErrorKind::checksum, "cached pixels do not match their hash: " + file.string());
  st.source_path = meta.at("source_path").get<std::string>();
  if (!meta.at("pixel_scale").is_null()) st.pixel_scale = meta["pixel_scale"].get<double>();
  return st;
}

}  // namespace

void Cache::save(const Session& s) const {
  const fs::path dir = entry_dir(s.hash_hex());
  fs::create_directories(dir / "models");
  save_stack_once(s.image, dir / "image.tiff");
  for (const auto& ch : s.signals) save_stack_once(ch.stack, dir / signal_file(ch));

  for (const auto& [name, bytes] : s.models) save_model(s.hash_hex(), name, bytes);
  for (const auto& entry : fs::directory_iterator(dir / "models")) {
    const fs::path p = entry.path();
    if (p.extension() == ".opml" && !s.models.contains(p.stem().string())) fs::remove(p);
  }

  json payload = session_state_to_json(s);
  for (std::size_t i = 0; i < s.signals.size(); ++i) payload["signals"][i]["file"] = signal_file(s.signals[i]);
  const json doc{{"format", "orgapipe-session"}, {"version", 1}, {"sha256", payload_digest(payload)},
                 {"payload", payload}};
  write(dir / "session.json", doc.dump());
}

std::optional<Session> Cache::load(const std::string& hash, std::vector<std::string>* warnings) const {
  const fs::path dir = entry_dir(hash);
  const fs::path file = dir / "session.json";
  if (!fs::exists(file)) return std::nullopt;
  auto warn = [&](const std::string& w) {
    if (warnings) warnings->push_back(w);
    return std::nullopt;
  };
  try {
    const json doc = json::parse(read_file(file));
    if (doc.at("format") != "orgapipe-session" || doc.at("version") != 1)
      return warn("cache entry " + hash + " has an unknown format");
    const json& payload = doc.at("payload");
    if (payload_digest(payload) != doc.at("sha256").get<std::string>())
      return warn("cache entry " + hash + " failed its checksum");
    if (payload.at("image").at("hash").get<std::string>() != hash)
      return warn("cache entry " + hash + " describes another image");

    std::vector<SignalChannel> signals;
    for (const auto& sj : payload.at("signals"))
      signals.push_back({sj.at("name").get<std::string>(), restore_stack(dir / sj.at("file").get<std::string>(), sj)});
    Session s = make_session(restore_stack(dir / "image.tiff", payload.at("image")), std::move(signals));
    session_state_from_json(s, payload);
    if (fs::exists(dir / "models"))
      for (const auto& entry : fs::directory_iterator(dir / "models")) {
        const fs::path p = entry.path();
        if (p.extension() != ".opml") continue;
        const std::string bytes = read_file(p);
        s.models[p.stem().string()] = std::vector<std::uint8_t>(bytes.begin(), bytes.end());
      }
    return s;
  } catch (const std::exception& e) {
    return warn("cache entry " + hash + " is unreadable: " + e.what());
  }
}

void Cache::save_model(const std::string& hash, const std::string& name, const std::vector<std::uint8_t>& bytes) const {
  validate_entry_name(name);
  const fs::path dir = entry_dir(hash) / "models";
  fs::create_directories(dir);
  write(dir / (name + ".opml"), {reinterpret_cast<const char*>(bytes.data()), bytes.size()});
}

std::optional<std::vector<std::uint8_t>> Cache::load_model(const std::string& hash, const std::string& name) const {
  validate_entry_name(name);
  const fs::path p = entry_dir(hash) / "models" / (name + ".opml");
  if (!fs::exists(p)) return std::nullopt;
  const std::string bytes = read_file(p);
  return std::vector<std::uint8_t>(bytes.begin(), bytes.end());
}

void Cache::suspend(const std::string& hash, const AnnotationSession& session, const AnnotationBook& book) const {
  validate_entry_name(session.name);
  const fs::path dir = entry_dir(hash) / "annotations";
  fs::create_directories(dir);
  json anns = json::array();
  for (DetectionId id : session.target_ids)
    if (const Annotation* a = book.find({id, session.kind, session.name})) anns.push_back(annotation_to_json(*a));
  const json doc{{"session", session_to_json(session)}, {"annotations", std::move(anns)}};
  write(dir / (session.name + ".json"), doc.dump());
}

AnnotationSession Cache::resume(const std::string& hash, const std::string& name, AnnotationBook& book) const {
  validate_entry_name(name);
  const fs::path p = entry_dir(hash) / "annotations" / (name + ".json");
  if (!fs::exists(p)) throw Error(ErrorKind::not_found, "no suspended annotation session '" + name + "'");
  json doc;
  try {
    doc = json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("corrupt annotation session: ") + e.what());
  }
  AnnotationSession s = annotation_session_from_json(doc.at("session"));
  for (const auto& a : doc.at("annotations")) book.put(annotation_from_json(a));
  return s;
}

}  // namespace orgapipe
