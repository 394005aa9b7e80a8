#include <gtest/gtest.h>

#include <chrono>
#include <future>
#include <random>
#include <sstream>

#include <httplib.h>

#include "error_matchers.hpp"
#include "mock_logic.hpp"
#include "orgapipe/pipeline.hpp"
#include "test_support.hpp"

using namespace orgapipe;
namespace ts = testsupport;
using nlohmann::json;

namespace {

AdapterEndpoint mock_endpoint(const std::string& args, double timeout = 10.0, int in_flight = 1) {
  AdapterEndpoint e;
  e.transport = Transport::stdio;
  e.address = std::string(ORGAPIPE_MOCK_SIDECAR) + " " + args;
  e.timeout_seconds = timeout;
  e.max_in_flight = in_flight;
  return e;
}

Frame small_tile(int w = 12, int h = 10) { return ts::disk_frame(w, h, {{6, 5, 3}}); }

std::string error_message(const std::function<void()>& fn, ErrorKind expected) {
  try {
    fn();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), expected) << e.what();
    return e.what();
  }
  ADD_FAILURE() << "no error raised";
  return {};
}

/// In-process HTTP sidecar built on the same reply logic as the stdio mock.
class HttpMock {
 public:
  explicit HttpMock(mock::Options opt) : opt_(opt) {
    server_.Post("/", [this](const httplib::Request& req, httplib::Response& res) {
      const json request = json::parse(req.body, nullptr, false);
      res.set_content(mock::reply_line(request, opt_, seq_++), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~HttpMock() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/"; }

 private:
  mock::Options opt_;
  std::atomic<std::size_t> seq_{0};
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST(Codec, RleRunsDecodeToPixels) {
  const BinaryMask m = decode_rle(json{{"shape", {1, 6}}, {"counts", {3, 2, 1}}}, 1, 6);
  std::vector<int> set;
  for (int x = 0; x < 6; ++x)
    if (m.get(x, 0)) set.push_back(x);
  EXPECT_EQ(set, (std::vector<int>{3, 4}));
  EXPECT_EQ(encode_rle(m)["counts"], json({3, 2, 1}));
}

TEST(Codec, RleRejectsBadRuns) {
  EXPECT_ERROR_KIND(decode_rle(json{{"shape", {1, 6}}, {"counts", {3, 2}}}, 1, 6), ErrorKind::protocol);
  EXPECT_ERROR_KIND(decode_rle(json{{"shape", {1, 6}}, {"counts", {3, 4}}}, 1, 6), ErrorKind::protocol);
  EXPECT_ERROR_KIND(decode_rle(json{{"shape", {1, 6}}, {"counts", {-1, 7}}}, 1, 6), ErrorKind::protocol);
  EXPECT_ERROR_KIND(decode_rle(json{{"shape", {2, 3}}, {"counts", {6}}}, 1, 6), ErrorKind::protocol);
}

TEST(Codec, RleRoundTripOnRandomMasks) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int w = 1 + static_cast<int>(rng() % 20), h = 1 + static_cast<int>(rng() % 20);
    BinaryMask m(w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (rng() % 3 == 0) m.set(x, y);
    const BinaryMask back = decode_rle(encode_rle(m), h, w);
    ASSERT_EQ(back.data, m.data);
  }
}

TEST(Codec, Base64Vectors) {
  auto enc = [](const std::string& s) { return base64_encode({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}); };
  EXPECT_EQ(enc(""), "");
  EXPECT_EQ(enc("f"), "Zg==");
  EXPECT_EQ(enc("fo"), "Zm8=");
  EXPECT_EQ(enc("foo"), "Zm9v");
  EXPECT_EQ(enc("foobar"), "Zm9vYmFy");
  const auto dec = base64_decode("Zm9vYmE=");
  EXPECT_EQ(std::string(dec.begin(), dec.end()), "fooba");
  EXPECT_ERROR_KIND(base64_decode("abc"), ErrorKind::protocol);
}

TEST(Codec, ImageRoundTripIsExact) {
  Frame f(3, 4, 3, 16);
  std::mt19937_64 rng(3);
  for (auto& v : f.pixels) v = std::uniform_real_distribution<double>(0, 1)(rng);
  const json j = encode_image(f);
  EXPECT_EQ(j["shape"], json({3, 4, 3}));
  EXPECT_EQ(j["dtype"], "<f8");
  EXPECT_EQ(decode_image(j).pixels, f.pixels);
  json bad = j;
  bad["dtype"] = "<f4";
  EXPECT_ERROR_KIND(decode_image(bad), ErrorKind::protocol);
}

TEST(Endpoint, Validation) {
  AdapterEndpoint e = mock_endpoint("");
  e.timeout_seconds = 0;
  EXPECT_ERROR_KIND(e.validate(), ErrorKind::invalid_argument);
  e = mock_endpoint("");
  e.max_in_flight = 0;
  EXPECT_ERROR_KIND(e.validate(), ErrorKind::invalid_argument);
  e.max_in_flight = 1;
  e.address.clear();
  EXPECT_ERROR_KIND(e.validate(), ErrorKind::invalid_argument);
}

TEST(Health, MockDeclaresBothCapabilities) {
  AdapterClient client(mock_endpoint("--mode fixed"));
  const Capabilities caps = client.health();
  EXPECT_TRUE(caps.detect);
  EXPECT_TRUE(caps.segment);
  EXPECT_EQ(caps.model, "mock-fixture");
}

TEST(Health, DeadEndpointTimesOutAfterConfiguredSeconds) {
  AdapterClient client(mock_endpoint("--slow-health --delay 5", 0.3));
  const auto start = std::chrono::steady_clock::now();
  EXPECT_ERROR_KIND(client.health(), ErrorKind::timeout);
  const double waited = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_GE(waited, 0.3);
  EXPECT_LT(waited, 2.0);
}

TEST(Health, ExitedProcessIsTransportError) {
  AdapterEndpoint e = mock_endpoint("");
  e.address = "exit 0";
  AdapterClient client(e);
  EXPECT_ERROR_KIND(client.health(), ErrorKind::transport);
}

TEST(Health, ReplyMissingIdIsProtocolError) {
  AdapterClient client(mock_endpoint("--mode no-id"));
  EXPECT_ERROR_KIND(client.health(), ErrorKind::protocol);
}

TEST(Health, MalformedReplyIsProtocolError) {
  AdapterClient client(mock_endpoint("--mode malformed"));
  const std::string msg = error_message([&] { client.health(); }, ErrorKind::protocol);
  EXPECT_NE(msg.find("malformed"), std::string::npos);
}

TEST(Detect, FixedBoxPassesThrough) {
  AdapterClient client(mock_endpoint("--mode fixed"));
  const auto result = client.detect(small_tile());
  ASSERT_EQ(result.boxes.size(), 1u);
  EXPECT_EQ(result.boxes[0].rect, (Rect{1, 1, 5, 5}));
  EXPECT_EQ(result.boxes[0].confidence, 0.9);
  EXPECT_EQ(result.dropped, 0u);
}

TEST(Detect, OutOfRangeConfidenceDropped) {
  AdapterClient client(mock_endpoint("--mode bad-confidence"));
  const auto result = client.detect(small_tile());
  ASSERT_EQ(result.boxes.size(), 1u);
  EXPECT_EQ(result.boxes[0].confidence, 0.5);
  EXPECT_EQ(result.dropped, 1u);
  const auto tiny = client.detect(small_tile(4, 4));
  EXPECT_TRUE(tiny.boxes.empty());
  EXPECT_EQ(tiny.dropped, 2u);
}

TEST(Detect, SlowReplyTimesOut) {
  AdapterClient client(mock_endpoint("--mode slow --delay 0.8", 0.3));
  EXPECT_ERROR_KIND(client.detect(small_tile()), ErrorKind::timeout);
  // The serial sidecar finishes the slow request; its late reply is discarded and the next call succeeds.
  std::this_thread::sleep_for(std::chrono::milliseconds(900));
  EXPECT_TRUE(client.health().detect);
}

TEST(Detect, ErrorReplyCarriesMessage) {
  AdapterClient client(mock_endpoint("--mode error"));
  const std::string msg = error_message([&] { client.detect(small_tile()); }, ErrorKind::protocol);
  EXPECT_NE(msg.find("model exploded"), std::string::npos);
}

TEST(Detect, PayloadAndErrorTogetherRejected) {
  AdapterClient client(mock_endpoint("--mode both"));
  EXPECT_ERROR_KIND(client.detect(small_tile()), ErrorKind::protocol);
}

TEST(Segment, EchoedPromptHasRectArea) {
  AdapterClient client(mock_endpoint("--mode fixed"));
  const BinaryMask m = client.segment(ts::disk_frame(20, 16, {}), {2, 3, 9, 8});
  EXPECT_EQ(m.width, 20);
  EXPECT_EQ(m.height, 16);
  EXPECT_EQ(std::count(m.data.begin(), m.data.end(), 1), 7 * 5);
}

TEST(Segment, WrongMaskShapeIsProtocolError) {
  AdapterClient client(mock_endpoint("--mode bad-shape"));
  EXPECT_ERROR_KIND(client.segment(ts::disk_frame(20, 16, {}), {2, 3, 9, 8}), ErrorKind::protocol);
}

TEST(Pipelining, ShuffledRepliesMatchTheirRequests) {
  AdapterClient client(mock_endpoint("--mode fixed --shuffle", 10.0, 16));
  std::vector<std::future<BinaryMask>> futures;
  std::vector<Rect> prompts;
  for (int i = 0; i < 48; ++i) {
    const Rect r{double(i % 7), double(i % 5), double(i % 7 + 1 + i % 9), double(i % 5 + 1 + i % 4)};
    prompts.push_back(r);
    futures.push_back(std::async(std::launch::async, [&client, r] { return client.segment(ts::disk_frame(20, 16, {}), r); }));
  }
  for (std::size_t i = 0; i < futures.size(); ++i) {
    const BinaryMask m = futures[i].get();
    EXPECT_EQ(std::count(m.data.begin(), m.data.end(), 1), static_cast<long>(prompts[i].area())) << i;
  }
}

TEST(Pipelining, SerialEndpointStillServesConcurrentCallers) {
  AdapterClient client(mock_endpoint("--mode fixed"));
  std::vector<std::future<std::size_t>> futures;
  for (int i = 0; i < 8; ++i)
    futures.push_back(std::async(std::launch::async, [&client] { return client.detect(small_tile()).boxes.size(); }));
  for (auto& f : futures) EXPECT_EQ(f.get(), 1u);
}

TEST(Http, SameProtocolOverPost) {
  HttpMock server({mock::Mode::fixed, 0.0, false});
  AdapterEndpoint e;
  e.transport = Transport::http;
  e.address = server.url();
  e.max_in_flight = 4;
  AdapterClient client(e);
  EXPECT_TRUE(client.health().segment);
  EXPECT_EQ(client.detect(small_tile()).boxes.size(), 1u);
  const BinaryMask m = client.segment(ts::disk_frame(20, 16, {}), {2, 3, 9, 8});
  EXPECT_EQ(std::count(m.data.begin(), m.data.end(), 1), 35);
}

TEST(Http, SlowAndMalformedReplies) {
  HttpMock slow({mock::Mode::slow, 0.8, false});
  AdapterEndpoint e;
  e.transport = Transport::http;
  e.address = slow.url();
  e.timeout_seconds = 0.3;
  AdapterClient slow_client(e);
  EXPECT_ERROR_KIND(slow_client.detect(small_tile()), ErrorKind::timeout);

  HttpMock bad({mock::Mode::malformed, 0.0, false});
  e.address = bad.url();
  e.timeout_seconds = 5;
  AdapterClient bad_client(e);
  EXPECT_ERROR_KIND(bad_client.health(), ErrorKind::protocol);

  e.address = "ftp://example";
  EXPECT_ERROR_KIND(AdapterClient{e}, ErrorKind::invalid_argument);
}

TEST(Transparency, ReplayingMockMatchesClassicalSession) {
  Session classical = make_session(ts::disk_timelapse());
  stage_detect(classical, {});
  stage_segment(classical, {});
  stage_features(classical);

  Session remote = make_session(ts::disk_timelapse());
  DetectStageConfig dc;
  dc.adapter = mock_endpoint("--mode classical");
  SegmentStageConfig sc;
  sc.adapter = mock_endpoint("--mode classical");
  const auto dr = stage_detect(remote, dc);
  EXPECT_TRUE(dr.warnings.empty());
  stage_segment(remote, sc);
  stage_features(remote);

  EXPECT_EQ(session_state_to_json(remote).dump(), session_state_to_json(classical).dump());
  EXPECT_EQ(export_csv(remote), export_csv(classical));
}

TEST(StageErrors, TileFailuresAreReportedAndRunContinues) {
  Session s = make_session(ts::disk_timelapse());
  DetectStageConfig dc;
  dc.adapter = mock_endpoint("--mode flaky");
  const StageReport r = stage_detect(s, dc);
  EXPECT_GT(r.summary["tile_errors"].get<int>(), 0);
  EXPECT_FALSE(r.warnings.empty());
  EXPECT_NE(r.warnings.front().find("model exploded"), std::string::npos) << r.warnings.front();
  EXPECT_FALSE(s.detections.empty());

  Session t = make_session(ts::disk_timelapse());
  dc.adapter = mock_endpoint("--mode bad-confidence");
  const StageReport dropped = stage_detect(t, dc);
  EXPECT_GT(dropped.summary["dropped_boxes"].get<int>(), 0);

  Session u = make_session(ts::disk_timelapse());
  dc.adapter = mock_endpoint("--mode garbled");
  const StageReport garbled = stage_detect(u, dc);
  EXPECT_GT(garbled.summary["tile_errors"].get<int>(), 0);
  EXPECT_NE(garbled.warnings.front().find("protocol: malformed reply"), std::string::npos) << garbled.warnings.front();
  EXPECT_FALSE(u.detections.empty());

  Session v = make_session(ts::disk_timelapse());
  dc.adapter = mock_endpoint("--mode slow --delay 0.4", 0.15);
  const StageReport slow = stage_detect(v, dc);
  EXPECT_EQ(slow.summary["tile_errors"], 5);
  EXPECT_NE(slow.warnings.front().find("timeout"), std::string::npos) << slow.warnings.front();
}

TEST(GoldenTranscript, MockRepliesAndEngineRequestsMatch) {
  std::istringstream in(ts::read_file(ts::fixture_path("transcript_fixed.ndjson")));
  std::size_t seq = 0;
  for (std::string line; std::getline(in, line); ++seq) {
    const json entry = json::parse(line);
    const json& request = entry["request"];
    EXPECT_EQ(json::parse(mock::reply_line(request, {mock::Mode::fixed, 0.0, false}, seq)), entry["reply"]) << line;
    if (request.contains("image")) {
      const Frame f = decode_image(request["image"]);
      EXPECT_EQ(encode_image(f), request["image"]);
    }
    if (entry["reply"].contains("mask")) {
      const auto& shape = entry["reply"]["mask"]["shape"];
      const BinaryMask m = decode_rle(entry["reply"]["mask"], shape[0].get<int>(), shape[1].get<int>());
      EXPECT_EQ(encode_rle(m), entry["reply"]["mask"]);
    }
  }
  EXPECT_EQ(seq, 6u);
}
