#include "orgapipe/annotations.hpp"

#include <algorithm>

#include "orgapipe/table.hpp"

namespace orgapipe {

using nlohmann::json;

std::string_view to_string(AnnotationKind kind) {
  switch (kind) {
    case AnnotationKind::text: return "text";
    case AnnotationKind::number: return "number";
    case AnnotationKind::classes: return "classes";
    case AnnotationKind::object: return "object";
    case AnnotationKind::ruler: return "ruler";
  }
  return "text";
}

AnnotationKind annotation_kind_from_string(std::string_view s) {
  for (auto k : {AnnotationKind::text, AnnotationKind::number, AnnotationKind::classes, AnnotationKind::object,
                 AnnotationKind::ruler})
    if (to_string(k) == s) return k;
  throw Error(ErrorKind::invalid_argument, "unknown annotation kind '" + std::string(s) + "'");
}

namespace {

[[noreturn]] void mismatch(AnnotationKind kind, const std::string& what) {
  throw Error(ErrorKind::invalid_argument,
              "payload does not match annotation kind '" + std::string(to_string(kind)) + "': " + what);
}

Point parse_point(AnnotationKind kind, const json& j) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) mismatch(kind, "expected [x, y]");
  return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

AnnotationPayload parse_payload(AnnotationKind kind, const json& j) {
  switch (kind) {
    case AnnotationKind::text:
      if (!j.is_string()) mismatch(kind, "expected a string");
      return j.get<std::string>();
    case AnnotationKind::number:
      if (!j.is_number()) mismatch(kind, "expected a number");
      return j.get<double>();
    case AnnotationKind::classes: {
      if (!j.is_array()) mismatch(kind, "expected a list of labels");
      std::set<std::string> labels;
      for (const auto& e : j) {
        if (!e.is_string()) mismatch(kind, "labels must be strings");
        labels.insert(e.get<std::string>());
      }
      return labels;
    }
    case AnnotationKind::object: {
      if (!j.is_array()) mismatch(kind, "expected a list of rects");
      std::vector<Rect> rects;
      for (const auto& e : j) {
        if (!e.is_array() || e.size() != 4) mismatch(kind, "rect must be [x_min, y_min, x_max, y_max]");
        for (const auto& v : e)
          if (!v.is_number()) mismatch(kind, "rect coordinates must be numbers");
        const Rect r{e[0].get<double>(), e[1].get<double>(), e[2].get<double>(), e[3].get<double>()};
        if (!r.valid()) mismatch(kind, "empty rect");
        rects.push_back(r);
      }
      return rects;
    }
    case AnnotationKind::ruler: {
      if (!j.is_array()) mismatch(kind, "expected a list of polylines");
      std::vector<Polyline> lines;
      for (const auto& e : j) {
        if (!e.is_array() || e.size() < 2) mismatch(kind, "polyline needs at least 2 points");
        Polyline line;
        for (const auto& p : e) line.push_back(parse_point(kind, p));
        lines.push_back(std::move(line));
      }
      return lines;
    }
  }
  mismatch(kind, "unknown kind");
}

json payload_to_json(const AnnotationPayload& payload) {
  return std::visit(
      [](const auto& v) -> json {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, std::vector<Rect>>) {
          json out = json::array();
          for (const Rect& r : v) out.push_back({r.x_min, r.y_min, r.x_max, r.y_max});
          return out;
        } else if constexpr (std::is_same_v<T, std::vector<Polyline>>) {
          json out = json::array();
          for (const auto& line : v) {
            json pts = json::array();
            for (const Point& p : line) pts.push_back({p.x, p.y});
            out.push_back(std::move(pts));
          }
          return out;
        } else {
          return json(v);
        }
      },
      payload);
}

json annotation_to_json(const Annotation& a) {
  return {{"detection_id", a.detection_id}, {"kind", to_string(a.kind)}, {"name", a.name},
          {"payload", payload_to_json(a.payload)}, {"author", a.author}, {"timestamp", a.timestamp}};
}

Annotation annotation_from_json(const json& j) {
  Annotation a;
  a.detection_id = j.at("detection_id").get<DetectionId>();
  a.kind = annotation_kind_from_string(j.at("kind").get<std::string>());
  a.name = j.at("name").get<std::string>();
  a.payload = parse_payload(a.kind, j.at("payload"));
  a.author = j.value("author", "");
  a.timestamp = j.value("timestamp", "");
  return a;
}

std::string payload_to_cell(const AnnotationPayload& payload) {
  if (const auto* s = std::get_if<std::string>(&payload)) return *s;
  if (const auto* d = std::get_if<double>(&payload)) return format_number(*d);
  if (const auto* labels = std::get_if<std::set<std::string>>(&payload)) {
    std::string out;
    for (const auto& l : *labels) {
      if (!out.empty()) out += ';';
      out += l;
    }
    return out;
  }
  return payload_to_json(payload).dump();
}

void AnnotationBook::put(Annotation a) {
  AnnotationKey key{a.detection_id, a.kind, a.name};
  entries_.insert_or_assign(std::move(key), std::move(a));
}

const Annotation* AnnotationBook::find(const AnnotationKey& key) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : &it->second;
}

void AnnotationBook::erase_detection(DetectionId id) {
  std::erase_if(entries_, [id](const auto& e) { return e.first.detection_id == id; });
}

std::vector<Annotation> AnnotationBook::for_detection(DetectionId id) const {
  std::vector<Annotation> out;
  for (const auto& [key, a] : entries_)
    if (key.detection_id == id) out.push_back(a);
  return out;
}

std::vector<std::pair<AnnotationKind, std::string>> AnnotationBook::columns() const {
  std::set<std::pair<AnnotationKind, std::string>> seen;
  for (const auto& [key, a] : entries_) seen.emplace(key.kind, key.name);
  return {seen.begin(), seen.end()};
}

json session_to_json(const AnnotationSession& s) {
  json j{{"name", s.name}, {"kind", to_string(s.kind)}, {"target_ids", s.target_ids}, {"cursor", s.cursor}};
  j["vocabulary"] = s.vocabulary ? json(*s.vocabulary) : json(nullptr);
  return j;
}

AnnotationSession annotation_session_from_json(const json& j) {
  AnnotationSession s;
  s.name = j.at("name").get<std::string>();
  s.kind = annotation_kind_from_string(j.at("kind").get<std::string>());
  s.target_ids = j.at("target_ids").get<std::vector<DetectionId>>();
  s.cursor = j.at("cursor").get<std::size_t>();
  if (j.contains("vocabulary") && !j["vocabulary"].is_null())
    s.vocabulary = j["vocabulary"].get<std::set<std::string>>();
  if (s.cursor > s.target_ids.size()) throw Error(ErrorKind::format, "annotation session cursor out of range");
  return s;
}

void advance_cursor(AnnotationSession& session, const AnnotationBook& book) {
  session.cursor = 0;
  while (session.cursor < session.target_ids.size() &&
         book.contains({session.target_ids[session.cursor], session.kind, session.name}))
    ++session.cursor;
}

void annotate(AnnotationSession& session, AnnotationBook& book, FeatureTable& features, DetectionId id,
              AnnotationPayload payload, const AnnotateContext& ctx) {
  if (std::find(session.target_ids.begin(), session.target_ids.end(), id) == session.target_ids.end())
    throw Error(ErrorKind::invalid_argument, "detection " + std::to_string(id) + " is not a target of session '" +
                                                 session.name + "'");
  if (payload.index() != static_cast<std::size_t>(session.kind))
    throw Error(ErrorKind::invalid_argument,
                "payload type does not match annotation kind '" + std::string(to_string(session.kind)) + "'");
  if (const auto* labels = std::get_if<std::set<std::string>>(&payload); labels && session.vocabulary) {
    for (const auto& l : *labels)
      if (!session.vocabulary->contains(l))
        throw Error(ErrorKind::invalid_argument, "class label '" + l + "' is not in the session vocabulary");
  }
  if (const auto* rects = std::get_if<std::vector<Rect>>(&payload); rects && ctx.frame_width > 0) {
    for (const Rect& r : *rects)
      if (!r.within(ctx.frame_width, ctx.frame_height))
        throw Error(ErrorKind::invalid_argument, "object annotation rect outside the frame");
  }
  if (const auto* lines = std::get_if<std::vector<Polyline>>(&payload)) {
    std::vector<double> lengths;
    for (const auto& line : *lines) lengths.push_back(ruler_length(line, ctx.pixel_scale));
    std::vector<std::string> stale;
    if (auto row = features.rows().find(id); row != features.rows().end())
      for (const auto& cell : row->second)
        if (cell.first.starts_with("ruler_length_")) stale.push_back(cell.first);
    for (const auto& column : stale) features.erase(id, column);
    for (std::size_t i = 0; i < lengths.size(); ++i) {
      const std::string column = "ruler_length_" + std::to_string(i + 1);
      features.ensure_column({column, ColumnKind::annotation, {}, {}});
      features.set(id, column, lengths[i]);
    }
  }
  book.put({id, session.kind, session.name, std::move(payload), ctx.author, ctx.timestamp});
  advance_cursor(session, book);
}

}  // namespace orgapipe
