#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "error_matchers.hpp"
#include "orgapipe/pipeline.hpp"
#include "test_support.hpp"

using namespace orgapipe;
namespace ts = testsupport;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

/// Classical run over the disk timelapse with a signal channel, annotations and a model.
Session analysed_session() {
  Session s = make_session(ts::disk_timelapse(), {{"gfp", ts::disk_signal(0.5)}});
  stage_detect(s, {});
  stage_track(s, {15.0, 1, false});
  stage_segment(s, {});
  stage_features(s);
  const DetectionId first = s.detections.begin()->first;
  const DetectionId last = s.detections.rbegin()->first;
  s.annotations.put({first, AnnotationKind::text, "note", std::string("looks, \"odd\""), "ana", "2026-01-01T00:00:00Z"});
  s.annotations.put({last, AnnotationKind::number, "score", 2.5, "", ""});
  s.annotations.put({first, AnnotationKind::ruler, "len", std::vector<Polyline>{{{0, 0}, {3, 4}}}, "", ""});
  s.annotation_sessions["pass1"] = {"pass1", AnnotationKind::classes, {first, last}, 1, std::set<std::string>{"a", "b"}};
  s.models["toy"] = {'O', 'P', 'M', 'L', 1, 0};
  return s;
}

std::vector<std::string> column(const TabularData& t, const std::string& name) {
  const auto it = std::find(t.columns.begin(), t.columns.end(), name);
  EXPECT_NE(it, t.columns.end()) << name;
  std::vector<std::string> out;
  for (const auto& row : t.rows) {
    const Cell& c = row[it - t.columns.begin()];
    out.push_back(std::holds_alternative<std::string>(c) ? std::get<std::string>(c) : std::string());
  }
  return out;
}

std::string npy_probe(const fs::path& file, const std::string& expr) {
  const auto r = ts::run_command("python3 -c \"import numpy as np; a = np.load('" + file.string() + "'); print(" + expr +
                                 ")\" 2>&1");
  EXPECT_EQ(r.exit_code, 0) << r.out;
  return r.out.substr(0, r.out.find_last_not_of('\n') + 1);
}

}  // namespace

TEST(Session, AnalysedSessionIsConsistent) {
  const Session s = analysed_session();
  EXPECT_EQ(s.detections.size(), 15u);
  EXPECT_EQ(s.tracks.tracks.size(), 3u);
  EXPECT_TRUE(integrity_violations(s).empty());
}

TEST(Session, SignalChannelsValidated) {
  EXPECT_ERROR_KIND(make_session(ts::disk_timelapse(), {{"primary", ts::disk_signal(1)}}), ErrorKind::invalid_argument);
  std::vector<Frame> one{ts::disk_frame(ts::kTimelapseWidth, ts::kTimelapseHeight, {})};
  EXPECT_ERROR_KIND(make_session(ts::disk_timelapse(), {{"x", make_stack(std::move(one))}}),
                    ErrorKind::invalid_argument);
}

TEST(Cache, RoundTripIsDeepEqual) {
  ts::TempDir dir;
  const Cache cache(dir.path());
  const Session s = analysed_session();
  cache.save(s);
  EXPECT_TRUE(cache.contains(s.hash_hex()));
  std::vector<std::string> warnings;
  const auto back = cache.load(s.hash_hex(), &warnings);
  ASSERT_TRUE(back);
  EXPECT_TRUE(warnings.empty());
  EXPECT_TRUE(*back == s);
  cache.save(*back);
  EXPECT_TRUE(*cache.load(s.hash_hex()) == s);
}

TEST(Cache, UnseenHashIsAbsent) {
  ts::TempDir dir;
  const Cache cache(dir.path());
  EXPECT_FALSE(cache.load(std::string(64, 'a')));
  EXPECT_ERROR_KIND(cache.load("../etc"), ErrorKind::invalid_argument);
}

TEST(Cache, CorruptEntryIsAbsentWithWarning) {
  ts::TempDir dir;
  const Cache cache(dir.path());
  const Session s = analysed_session();
  cache.save(s);
  const fs::path file = cache.entry_dir(s.hash_hex()) / "session.json";
  std::string text = ts::read_file(file);
  const std::string from = "\"provenance\":\"model\"";
  const auto pos = text.find(from);
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, from.size(), "\"provenance\":\"manual\"");
  ts::write_text(file, text);
  std::vector<std::string> warnings;
  EXPECT_FALSE(cache.load(s.hash_hex(), &warnings));
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("checksum"), std::string::npos) << warnings[0];

  ts::write_text(file, "{ not json");
  warnings.clear();
  EXPECT_FALSE(cache.load(s.hash_hex(), &warnings));
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(Cache, InterruptedWriteLeavesPreviousEntry) {
  ts::TempDir dir;
  Cache cache(dir.path());
  Session s = analysed_session();
  cache.save(s);
  Session edited = s;
  delete_detection(edited, edited.detections.begin()->first);
  cache.before_rename = [](const fs::path& tmp, const fs::path&) {
    EXPECT_TRUE(fs::exists(tmp));
    throw Error(ErrorKind::io, "simulated crash");
  };
  EXPECT_ERROR_KIND(cache.save(edited), ErrorKind::io);
  cache.before_rename = nullptr;
  const auto back = cache.load(s.hash_hex());
  ASSERT_TRUE(back);
  EXPECT_TRUE(*back == s);
}

TEST(Cache, ModelsAndNames) {
  ts::TempDir dir;
  const Cache cache(dir.path());
  const std::string hash(64, 'b');
  cache.save_model(hash, "m1", {1, 2, 3});
  EXPECT_EQ(*cache.load_model(hash, "m1"), (std::vector<std::uint8_t>{1, 2, 3}));
  EXPECT_FALSE(cache.load_model(hash, "m2"));
  EXPECT_ERROR_KIND(cache.save_model(hash, "../x", {1}), ErrorKind::invalid_argument);
  EXPECT_ERROR_KIND(validate_entry_name(""), ErrorKind::invalid_argument);
}

TEST(Cache, DefaultRootHonoursEnvironment) {
  ::setenv("ORGAPIPE_CACHE", "/tmp/orgapipe-env-test", 1);
  EXPECT_EQ(Cache::default_root(), fs::path("/tmp/orgapipe-env-test"));
  ::unsetenv("ORGAPIPE_CACHE");
  EXPECT_NE(Cache::default_root(), fs::path("/tmp/orgapipe-env-test"));
}

TEST(ExportJson, SubsetRoundTripIntoFreshSession) {
  const Session s = analysed_session();
  std::vector<DetectionId> ids;
  for (const auto& [id, r] : s.detections)
    if (r.frame_index == 2) ids.push_back(id);
  const json doc = export_json(s, ids);
  EXPECT_EQ(doc["records"].size(), 3u);

  Session fresh = make_session(ts::disk_timelapse(), {{"gfp", ts::disk_signal(0.5)}});
  const auto report = import_json(fresh, doc);
  EXPECT_TRUE(report.warnings.empty());
  ASSERT_EQ(fresh.detections.size(), 3u);
  for (DetectionId id : ids) {
    ASSERT_EQ(report.id_map.at(id), id);
    EXPECT_EQ(fresh.record(id), s.record(id));
    EXPECT_EQ(fresh.masks.at({id, "gfp"}), s.masks.at({id, "gfp"}));
    EXPECT_EQ(fresh.features.rows().at(id), s.features.rows().at(id));
  }
  EXPECT_TRUE(integrity_violations(fresh).empty());
  EXPECT_EQ(export_json(fresh, ids), doc);
}

TEST(ExportJson, EmptySubsetIsValid) {
  const Session s = analysed_session();
  const json doc = export_json(s, {});
  EXPECT_TRUE(doc["records"].empty());
  Session copy = s;
  const auto report = import_json(copy, doc);
  EXPECT_TRUE(report.id_map.empty());
  EXPECT_TRUE(copy == s);
  EXPECT_ERROR_KIND(export_json(s, {9999}), ErrorKind::not_found);
}

TEST(ExportJson, ForeignHashRemapsIds) {
  const Session s = analysed_session();
  const json doc = export_json(s, {}, true);
  std::vector<Frame> frames;
  for (const auto& disks : ts::timelapse_truth())
    frames.push_back(ts::disk_frame(ts::kTimelapseWidth, ts::kTimelapseHeight, disks, 0.1, 0.9));
  Session other = make_session(make_stack(std::move(frames)));
  add_detection(other, 0, {1, 1, 5, 5});
  const auto report = import_json(other, doc);
  EXPECT_FALSE(report.warnings.empty());
  EXPECT_EQ(other.detections.size(), 16u);
  std::set<DetectionId> fresh;
  for (const auto& [from, to] : report.id_map) fresh.insert(to);
  EXPECT_EQ(fresh.size(), 15u);
  EXPECT_FALSE(fresh.contains(1));
  for (const auto& [id, r] : other.detections) EXPECT_FALSE(r.track_id);
  EXPECT_TRUE(integrity_violations(other).empty());
}

TEST(ExportJson, ImportValidates) {
  Session s = analysed_session();
  json doc = export_json(s, {s.detections.begin()->first});
  json bad = doc;
  bad["version"] = 2;
  EXPECT_ERROR_KIND(import_json(s, bad), ErrorKind::version);
  bad = doc;
  bad["records"][0]["bbox"] = {0, 0, 500, 10};
  EXPECT_ERROR_KIND(import_json(s, bad), ErrorKind::invalid_argument);
}

TEST(ExportCsv, ColumnsAndRows) {
  const Session s = analysed_session();
  std::istringstream in(export_csv(s));
  const TabularData t = read_csv(in);
  ASSERT_GE(t.columns.size(), 9u);
  EXPECT_EQ(std::vector<std::string>(t.columns.begin(), t.columns.begin() + 9),
            (std::vector<std::string>{"detection_id", "frame", "track_id", "x_min", "y_min", "x_max", "y_max",
                                      "confidence", "provenance"}));
  EXPECT_EQ(t.rows.size(), 15u);
  const std::vector<std::string> expected_tail{"ann:text:note", "ann:number:score", "ann:ruler:len"};
  EXPECT_EQ(std::vector<std::string>(t.columns.end() - 3, t.columns.end()), expected_tail);
  EXPECT_EQ(column(t, "ann:text:note")[0], "looks, \"odd\"");
  EXPECT_EQ(json::parse(column(t, "ann:ruler:len")[0]), json::parse("[[[0,0],[3,4]]]"));
}

TEST(ExportCsv, RespectsFilter) {
  Session s = analysed_session();
  s.filter.min_diameter = 42.0;
  std::istringstream in(export_csv(s));
  const TabularData t = read_csv(in);
  EXPECT_EQ(t.rows.size(), 5u);
}

TEST(ExportCsv, ReingestionPreservesNineSignificantDigits) {
  ts::TempDir dir;
  const Session s = analysed_session();
  ts::write_text(dir / "s.csv", export_csv(s));
  const ml::Dataset d = ml::load_training_csv(dir / "s.csv", "provenance", {"area", "perimeter", "roundness"});
  const auto visible = s.visible();
  ASSERT_EQ(d.size(), visible.size());
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < d.feature_names.size(); ++j) {
      const double original = *s.features.get(visible[i].detection_id, d.feature_names[j]);
      EXPECT_EQ(format_number(d.x.at(i, j)), format_number(original));
      EXPECT_LE(std::abs(d.x.at(i, j) - original), 5e-9 * std::abs(original));
    }
}

TEST(ExportNpy, ReadByNumpy) {
  if (!ts::python_with_numpy()) GTEST_SKIP() << "numpy unavailable";
  ts::TempDir dir;
  Session blank = make_session(make_stack({Frame(2, 2, 1, 8)}));
  const auto zeros = export_npy(blank, 0);
  ts::write_text(dir / "z.npy", std::string(zeros.begin(), zeros.end()));
  EXPECT_EQ(npy_probe(dir / "z.npy", "a.dtype, a.shape, int(a.sum())"), "uint16 (2, 2) 0");

  Session one = make_session(make_stack({Frame(3, 4, 1, 8)}));
  one.next_detection_id = 7;
  const DetectionId id = add_detection(one, 0, {1, 1, 2, 2});
  ASSERT_EQ(id, 7u);
  one.masks[{id, std::string(kPrimaryChannel)}] = {id, 0, std::string(kPrimaryChannel), {{1, 1}, {2, 1}, {2, 2}, {1, 2}}};
  const auto single = export_npy(one, 0);
  ts::write_text(dir / "one.npy", std::string(single.begin(), single.end()));
  EXPECT_EQ(npy_probe(dir / "one.npy", "a.shape, a[1, 1], int(a.sum()), int((a > 0).sum())"), "(3, 4) 7 7 1");

  one.next_detection_id = 70000;
  const DetectionId big = add_detection(one, 0, {2, 0, 4, 1});
  one.masks[{big, std::string(kPrimaryChannel)}] = {big, 0, std::string(kPrimaryChannel), {{2, 0}, {4, 0}, {4, 1}, {2, 1}}};
  const auto wide = export_npy(one, 0);
  ts::write_text(dir / "wide.npy", std::string(wide.begin(), wide.end()));
  EXPECT_EQ(npy_probe(dir / "wide.npy", "a.dtype, a[0, 2], a[0, 3], a[1, 1]"), "uint32 70000 70000 7");
}

TEST(ExportNpy, OverlapsGoToLowerIdAndHeaderAligned) {
  Session s = make_session(make_stack({Frame(4, 4, 1, 8)}));
  const DetectionId a = add_detection(s, 0, {0, 0, 3, 3});
  const DetectionId b = add_detection(s, 0, {1, 1, 4, 4});
  s.masks[{b, std::string(kPrimaryChannel)}] = {b, 0, std::string(kPrimaryChannel), {{1, 1}, {4, 1}, {4, 4}, {1, 4}}};
  s.masks[{a, std::string(kPrimaryChannel)}] = {a, 0, std::string(kPrimaryChannel), {{0, 0}, {3, 0}, {3, 3}, {0, 3}}};
  const auto bytes = export_npy(s, 0);
  const std::size_t header_len = bytes[8] | (bytes[9] << 8);
  EXPECT_EQ((10 + header_len) % 64, 0u);
  const std::size_t base = 10 + header_len;
  auto label = [&](int x, int y) { return bytes[base + 2 * (y * 4 + x)] | (bytes[base + 2 * (y * 4 + x) + 1] << 8); };
  EXPECT_EQ(label(2, 2), static_cast<int>(a));
  EXPECT_EQ(label(3, 3), static_cast<int>(b));
  EXPECT_EQ(label(0, 3), 0);
  EXPECT_ERROR_KIND(export_npy(s, 1), ErrorKind::invalid_argument);
}

TEST(Edits, AddModifyDelete) {
  Session s = analysed_session();
  const DetectionId id = add_detection(s, 1, {2, 2, 12, 12});
  EXPECT_EQ(s.record(id).provenance, Provenance::manual);
  EXPECT_EQ(s.record(id).confidence, 1.0);
  EXPECT_ERROR_KIND(add_detection(s, 1, {190, 2, 210, 12}), ErrorKind::invalid_argument);
  EXPECT_ERROR_KIND(add_detection(s, 9, {2, 2, 12, 12}), ErrorKind::invalid_argument);

  const DetectionId seg = s.detections.begin()->first;
  ASSERT_TRUE(s.masks.contains({seg, std::string(kPrimaryChannel)}));
  const auto note = s.annotations.for_detection(seg);
  modify_detection(s, seg, {20, 20, 40, 40});
  EXPECT_FALSE(s.masks.contains({seg, std::string(kPrimaryChannel)}));
  EXPECT_FALSE(s.features.get(seg, "area"));
  EXPECT_EQ(s.annotations.for_detection(seg), note);

  delete_detection(s, seg);
  EXPECT_FALSE(s.detections.contains(seg));
  EXPECT_TRUE(s.annotations.for_detection(seg).empty());
  EXPECT_TRUE(integrity_violations(s).empty());
  EXPECT_ERROR_KIND(delete_detection(s, 999), ErrorKind::not_found);
  EXPECT_ERROR_KIND(modify_detection(s, 999, {1, 1, 2, 2}), ErrorKind::not_found);

  const DetectionId before = s.next_detection_id;
  clear_detections(s);
  EXPECT_TRUE(s.detections.empty());
  EXPECT_TRUE(s.tracks.tracks.empty());
  EXPECT_EQ(add_detection(s, 0, {1, 1, 3, 3}), before);
  EXPECT_TRUE(integrity_violations(s).empty());
}

TEST(Edits, RandomSequencesKeepIntegrity) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    Session s = analysed_session();
    for (int step = 0; step < 40; ++step) {
      std::vector<DetectionId> ids;
      for (const auto& [id, r] : s.detections) ids.push_back(id);
      const int op = static_cast<int>(rng() % 4);
      const int x = static_cast<int>(rng() % 190), y = static_cast<int>(rng() % 150);
      if (op == 0 || ids.empty()) {
        add_detection(s, static_cast<int>(rng() % 5), {double(x), double(y), x + 5.0, y + 5.0});
      } else if (op == 1) {
        modify_detection(s, ids[rng() % ids.size()], {double(x), double(y), x + 8.0, y + 8.0});
      } else if (op == 2) {
        delete_detection(s, ids[rng() % ids.size()]);
      } else {
        stage_track(s, {20.0, static_cast<int>(rng() % 2), rng() % 2 == 0});
      }
      const auto v = integrity_violations(s);
      ASSERT_TRUE(v.empty()) << "trial " << trial << " step " << step << ": " << v.front();
    }
  }
}

TEST(Snapshot, StateJsonRoundTrip) {
  const Session s = analysed_session();
  Session copy = make_session(s.image, s.signals);
  session_state_from_json(copy, session_state_to_json(s));
  copy.models = s.models;
  EXPECT_TRUE(copy == s);
  Session other = make_session(make_stack({Frame(4, 4, 1, 8)}));
  EXPECT_ERROR_KIND(session_state_from_json(other, session_state_to_json(s)), ErrorKind::format);
}
