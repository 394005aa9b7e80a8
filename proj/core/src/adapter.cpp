#include "orgapipe/adapter.hpp"

#include <openssl/evp.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <bit>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <map>
#include <mutex>
#include <regex>
#include <thread>

#include <httplib.h>

#include "orgapipe/error.hpp"

namespace orgapipe {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "wire images assume a little-endian host");

void AdapterEndpoint::validate() const {
  if (address.empty()) throw Error(ErrorKind::invalid_argument, "adapter address is empty");
  if (!(timeout_seconds > 0.0) || !std::isfinite(timeout_seconds))
    throw Error(ErrorKind::invalid_argument, "adapter timeout must be positive");
  if (max_in_flight < 1) throw Error(ErrorKind::invalid_argument, "adapter max_in_flight must be >= 1");
}

// ---------------------------------------------------------------------------------------------
// Codecs

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw Error(ErrorKind::protocol, "base64 length is not a multiple of 4");
  std::vector<std::uint8_t> out(text.size() / 4 * 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw Error(ErrorKind::protocol, "invalid base64 payload");
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

json encode_image(const Frame& frame) {
  const auto* bytes = reinterpret_cast<const std::uint8_t*>(frame.pixels.data());
  return {{"shape", {frame.height, frame.width, frame.channels}},
          {"dtype", "<f8"},
          {"data", base64_encode({bytes, frame.pixels.size() * sizeof(double)})}};
}

Frame decode_image(const json& j) {
  try {
    if (j.at("dtype") != "<f8") throw Error(ErrorKind::protocol, "unsupported image dtype");
    const auto& shape = j.at("shape");
    if (!shape.is_array() || shape.size() != 3) throw Error(ErrorKind::protocol, "image shape must be [h, w, c]");
    Frame f;
    f.height = shape[0].get<int>();
    f.width = shape[1].get<int>();
    f.channels = shape[2].get<int>();
    if (f.height <= 0 || f.width <= 0 || (f.channels != 1 && f.channels != 3 && f.channels != 4))
      throw Error(ErrorKind::protocol, "invalid image shape");
    const auto bytes = base64_decode(j.at("data").get<std::string>());
    const std::size_t n = static_cast<std::size_t>(f.height) * f.width * f.channels;
    if (bytes.size() != n * sizeof(double)) throw Error(ErrorKind::protocol, "image payload size mismatch");
    f.pixels.resize(n);
    std::memcpy(f.pixels.data(), bytes.data(), bytes.size());
    return f;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::protocol, std::string("malformed image: ") + e.what());
  }
}

json encode_rle(const BinaryMask& mask) {
  json counts = json::array();
  std::uint8_t current = 0;
  std::size_t run = 0;
  for (std::uint8_t v : mask.data) {
    const std::uint8_t bit = v ? 1 : 0;
    if (bit != current) {
      counts.push_back(run);
      current = bit;
      run = 0;
    }
    ++run;
  }
  counts.push_back(run);
  return {{"shape", {mask.height, mask.width}}, {"counts", std::move(counts)}};
}

BinaryMask decode_rle(const json& j, int height, int width) {
  try {
    const auto& shape = j.at("shape");
    if (!shape.is_array() || shape.size() != 2 || shape[0].get<int>() != height || shape[1].get<int>() != width)
      throw Error(ErrorKind::protocol, "mask shape does not match the crop");
    BinaryMask mask(width, height);
    std::size_t pos = 0;
    bool value = false;
    for (const auto& c : j.at("counts")) {
      if (!c.is_number_integer() || c.get<std::int64_t>() < 0)
        throw Error(ErrorKind::protocol, "mask run lengths must be non-negative integers");
      const auto run = c.get<std::size_t>();
      if (run > mask.data.size() - pos) throw Error(ErrorKind::protocol, "mask runs exceed the mask size");
      if (value) std::fill_n(mask.data.begin() + static_cast<std::ptrdiff_t>(pos), run, std::uint8_t{1});
      pos += run;
      value = !value;
    }
    if (pos != mask.data.size()) throw Error(ErrorKind::protocol, "mask runs do not cover the mask");
    return mask;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::protocol, std::string("malformed mask: ") + e.what());
  }
}

// ---------------------------------------------------------------------------------------------
// Transports

namespace {

using Clock = std::chrono::steady_clock;

/// Checks id echo and the payload/error exclusivity; throws on error replies.
json validate_reply(json reply, std::uint64_t id) {
  if (!reply.is_object()) throw Error(ErrorKind::protocol, "reply is not a JSON object");
  if (!reply.contains("id") || !reply["id"].is_number_unsigned() || reply["id"].get<std::uint64_t>() != id)
    throw Error(ErrorKind::protocol, "reply missing or mismatched id");
  if (!reply.contains("ok") || !reply["ok"].is_boolean()) throw Error(ErrorKind::protocol, "reply missing 'ok'");
  const bool has_error = reply.contains("error");
  if (reply["ok"].get<bool>()) {
    if (has_error) throw Error(ErrorKind::protocol, "reply carries both a payload and an error");
    return reply;
  }
  if (!has_error || !reply["error"].is_string()) throw Error(ErrorKind::protocol, "error reply without a message");
  for (const char* key : {"boxes", "mask", "capabilities"})
    if (reply.contains(key)) throw Error(ErrorKind::protocol, "reply carries both a payload and an error");
  throw Error(ErrorKind::protocol, "adapter error: " + reply["error"].get<std::string>());
}

struct Slot {
  bool done = false;
  json reply;
  std::optional<Error> error;
};

class Channel {
 public:
  virtual ~Channel() = default;
  virtual json roundtrip(const json& request, std::uint64_t id, Clock::time_point deadline) = 0;
};

/// Child process speaking NDJSON on stdin/stdout through a socketpair.
class StdioChannel final : public Channel {
 public:
  explicit StdioChannel(const std::string& command) {
    int fds[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, fds) != 0)
      throw Error(ErrorKind::transport, "socketpair failed");
    pid_ = ::fork();
    if (pid_ < 0) {
      ::close(fds[0]);
      ::close(fds[1]);
      throw Error(ErrorKind::transport, "fork failed");
    }
    if (pid_ == 0) {
      ::setpgid(0, 0);
      ::dup2(fds[1], 0);
      ::dup2(fds[1], 1);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(fds[1]);
    fd_ = fds[0];
    reader_ = std::thread([this] { read_loop(); });
  }

  ~StdioChannel() override {
    ::shutdown(fd_, SHUT_RDWR);
    ::kill(-pid_, SIGKILL);
    ::kill(pid_, SIGKILL);
    int status = 0;
    ::waitpid(pid_, &status, 0);
    reader_.join();
    ::close(fd_);
  }

  json roundtrip(const json& request, std::uint64_t id, Clock::time_point deadline) override {
    auto slot = std::make_shared<Slot>();
    {
      std::lock_guard lock(m_);
      if (dead_) throw Error(ErrorKind::transport, "adapter process is gone: " + dead_reason_);
      pending_[id] = slot;
    }
    const std::string line = request.dump() + "\n";
    {
      std::lock_guard lock(write_m_);
      std::size_t done = 0;
      while (done < line.size()) {
        const ssize_t n = ::send(fd_, line.data() + done, line.size() - done, MSG_NOSIGNAL);
        if (n <= 0) {
          std::lock_guard l(m_);
          pending_.erase(id);
          throw Error(ErrorKind::transport, "cannot write to adapter process");
        }
        done += static_cast<std::size_t>(n);
      }
    }
    std::unique_lock lock(m_);
    if (!cv_.wait_until(lock, deadline, [&] { return slot->done; })) {
      pending_.erase(id);
      throw Error(ErrorKind::timeout, "adapter did not reply in time");
    }
    if (slot->error) throw *slot->error;
    return std::move(slot->reply);
  }

 private:
  void read_loop() {
    std::string buffer;
    char chunk[65536];
    for (;;) {
      const ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
      if (n <= 0) break;
      buffer.append(chunk, static_cast<std::size_t>(n));
      std::size_t start = 0;
      for (std::size_t nl; (nl = buffer.find('\n', start)) != std::string::npos; start = nl + 1)
        dispatch(std::string_view(buffer).substr(start, nl - start));
      buffer.erase(0, start);
    }
    std::lock_guard lock(m_);
    dead_ = true;
    dead_reason_ = "connection closed";
    for (auto& [id, slot] : pending_) {
      slot->error = Error(ErrorKind::transport, "adapter process closed the connection");
      slot->done = true;
    }
    pending_.clear();
    cv_.notify_all();
  }

  void dispatch(std::string_view line) {
    if (line.empty()) return;
    json reply = json::parse(line, nullptr, false);
    std::lock_guard lock(m_);
    if (pending_.empty()) return;
    if (!reply.is_discarded() && reply.is_object() && reply.contains("id") && reply["id"].is_number_unsigned()) {
      auto it = pending_.find(reply["id"].get<std::uint64_t>());
      if (it == pending_.end()) return;  // late reply to a request that already timed out
      it->second->reply = std::move(reply);
      it->second->done = true;
      pending_.erase(it);
    } else {
      // Unattributable replies fail the oldest outstanding request.
      auto it = pending_.begin();
      it->second->error = Error(ErrorKind::protocol, reply.is_discarded() ? "malformed reply" : "reply missing id");
      it->second->done = true;
      pending_.erase(it);
    }
    cv_.notify_all();
  }

  pid_t pid_ = -1;
  int fd_ = -1;
  std::thread reader_;
  std::mutex write_m_;
  std::mutex m_;
  std::condition_variable cv_;
  std::map<std::uint64_t, std::shared_ptr<Slot>> pending_;
  bool dead_ = false;
  std::string dead_reason_;
};

class HttpChannel final : public Channel {
 public:
  explicit HttpChannel(const std::string& url) {
    static const std::regex re(R"(^http://([^/:]+)(?::(\d+))?(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, re)) throw Error(ErrorKind::invalid_argument, "unsupported adapter URL: " + url);
    host_ = m[1];
    port_ = m[2].matched ? std::stoi(m[2]) : 80;
    path_ = m[3].matched ? std::string(m[3]) : "/";
  }

  json roundtrip(const json& request, std::uint64_t, Clock::time_point deadline) override {
    const auto budget = std::chrono::duration_cast<std::chrono::microseconds>(deadline - Clock::now());
    if (budget.count() <= 0) throw Error(ErrorKind::timeout, "adapter did not reply in time");
    httplib::Client client(host_, port_);
    const auto sec = static_cast<time_t>(budget.count() / 1000000);
    const auto usec = static_cast<time_t>(budget.count() % 1000000);
    client.set_connection_timeout(sec, usec);
    client.set_read_timeout(sec, usec);
    client.set_write_timeout(sec, usec);
    auto res = client.Post(path_, request.dump() + "\n", "application/x-ndjson");
    if (!res) {
      const auto err = res.error();
      if (err == httplib::Error::ConnectionTimeout || (err == httplib::Error::Read && Clock::now() >= deadline))
        throw Error(ErrorKind::timeout, "adapter did not reply in time");
      throw Error(ErrorKind::transport, "adapter HTTP request failed: " + httplib::to_string(err));
    }
    if (res->status != 200) throw Error(ErrorKind::transport, "adapter HTTP status " + std::to_string(res->status));
    json reply = json::parse(res->body, nullptr, false);
    if (reply.is_discarded()) throw Error(ErrorKind::protocol, "malformed reply");
    return reply;
  }

 private:
  std::string host_;
  int port_ = 80;
  std::string path_;
};

}  // namespace

struct AdapterClient::Impl {
  AdapterEndpoint endpoint;
  std::unique_ptr<Channel> channel;
  std::atomic<std::uint64_t> next_id{1};
  std::mutex m;
  std::condition_variable cv;
  int in_flight = 0;
};

AdapterClient::AdapterClient(AdapterEndpoint endpoint) : impl_(std::make_unique<Impl>()) {
  endpoint.validate();
  impl_->endpoint = std::move(endpoint);
  if (impl_->endpoint.transport == Transport::stdio)
    impl_->channel = std::make_unique<StdioChannel>(impl_->endpoint.address);
  else
    impl_->channel = std::make_unique<HttpChannel>(impl_->endpoint.address);
}

AdapterClient::~AdapterClient() = default;

const AdapterEndpoint& AdapterClient::endpoint() const { return impl_->endpoint; }

json AdapterClient::call(json request) {
  const auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                           std::chrono::duration<double>(impl_->endpoint.timeout_seconds));
  {
    std::unique_lock lock(impl_->m);
    if (!impl_->cv.wait_until(lock, deadline, [&] { return impl_->in_flight < impl_->endpoint.max_in_flight; }))
      throw Error(ErrorKind::timeout, "adapter busy until the deadline");
    ++impl_->in_flight;
  }
  struct Release {
    Impl& impl;
    ~Release() {
      {
        std::lock_guard lock(impl.m);
        --impl.in_flight;
      }
      impl.cv.notify_one();
    }
  } release{*impl_};
  const std::uint64_t id = impl_->next_id++;
  request["id"] = id;
  return validate_reply(impl_->channel->roundtrip(request, id, deadline), id);
}

Capabilities AdapterClient::health() {
  const json reply = call({{"op", "health"}, {"protocol", kAdapterProtocolVersion}});
  try {
    Capabilities c;
    const auto& caps = reply.at("capabilities");
    c.detect = caps.value("detect", false);
    c.segment = caps.value("segment", false);
    c.model = reply.value("model", "");
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::protocol, std::string("malformed health reply: ") + e.what());
  }
}

AdapterClient::DetectResult AdapterClient::detect(const Frame& tile) {
  const json reply = call({{"op", "detect"}, {"image", encode_image(tile)}});
  if (!reply.contains("boxes") || !reply["boxes"].is_array())
    throw Error(ErrorKind::protocol, "detect reply without boxes");
  DetectResult out;
  for (const auto& b : reply["boxes"]) {
    const bool shaped = b.is_object() && b.contains("rect") && b["rect"].is_array() && b["rect"].size() == 4 &&
                        b.contains("confidence") && b["confidence"].is_number() &&
                        std::all_of(b["rect"].begin(), b["rect"].end(), [](const json& v) { return v.is_number(); });
    if (!shaped) {
      ++out.dropped;
      continue;
    }
    const auto& r = b["rect"];
    ScoredBox box{{r[0].get<double>(), r[1].get<double>(), r[2].get<double>(), r[3].get<double>()},
                  b["confidence"].get<double>()};
    const bool finite = std::isfinite(box.rect.x_min) && std::isfinite(box.rect.y_min) &&
                        std::isfinite(box.rect.x_max) && std::isfinite(box.rect.y_max);
    if (!finite || !box.rect.within(tile.width, tile.height) || !(box.confidence >= 0.0 && box.confidence <= 1.0)) {
      ++out.dropped;
      continue;
    }
    out.boxes.push_back(box);
  }
  return out;
}

BinaryMask AdapterClient::segment(const Frame& crop, const Rect& prompt) {
  const json reply = call({{"op", "segment"},
                           {"image", encode_image(crop)},
                           {"prompt_rect", {prompt.x_min, prompt.y_min, prompt.x_max, prompt.y_max}}});
  if (!reply.contains("mask")) throw Error(ErrorKind::protocol, "segment reply without a mask");
  return decode_rle(reply["mask"], crop.height, crop.width);
}

std::vector<ScoredBox> AdapterDetector::detect(const Frame& tile) {
  auto result = client_.detect(tile);
  dropped_ += result.dropped;
  return std::move(result.boxes);
}

}  // namespace orgapipe
