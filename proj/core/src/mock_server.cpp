#include "memprobe/mock_server.hpp"

#include <atomic>
#include <functional>
#include <random>
#include <thread>

#include <fmt/format.h>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "memprobe/tokenization.hpp"

namespace memprobe {
namespace {

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> out;
  WhitespaceTokenizer splitter;
  for (const auto& s : splitter.encode(text).source_spans) out.push_back(text.substr(s.begin, s.size()));
  return out;
}

std::uint64_t mix(std::uint64_t seed, std::string_view text) {
  // FNV-1a over the text, folded with the seed.
  std::uint64_t h = 1469598103934665603ull ^ seed;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

MockBehavior parse_mock_behavior(std::string_view spec) {
  MockBehavior b;
  if (spec == "echo-truth") {
    b.kind = MockKind::echo_truth;
  } else if (spec.starts_with("fixed")) {
    b.kind = MockKind::fixed_string;
    if (spec.size() > 5) {
      if (spec[5] != ':') throw std::invalid_argument("expected fixed:<text>");
      b.fixed_text = std::string(spec.substr(6));
    }
  } else if (spec.starts_with("noise:")) {
    b.kind = MockKind::truth_with_noise;
    b.noise_p = std::stod(std::string(spec.substr(6)));
    if (!(b.noise_p >= 0.0 && b.noise_p <= 1.0)) throw std::invalid_argument("noise probability must be in [0,1]");
  } else if (spec == "lookup") {
    b.kind = MockKind::lookup;
  } else {
    throw std::invalid_argument(
        fmt::format("unknown mock behavior '{}' (expected echo-truth|fixed[:text]|noise:<p>|lookup)", spec));
  }
  return b;
}

std::optional<std::string> truth_continuation(const std::vector<std::string>& texts, std::string_view prompt,
                                              std::size_t max_words) {
  auto pw = split_words(prompt);
  if (pw.empty()) return std::nullopt;
  const std::string_view last = pw.back();
  const std::size_t key_len = std::min<std::size_t>(pw.size() - 1, 64);
  for (const auto& text : texts) {
    auto tw = split_words(text);
    // Candidate positions p where tw[p] extends the last prompt word and the
    // preceding key_len words match exactly.
    for (std::size_t p = key_len; p < tw.size(); ++p) {
      if (!tw[p].starts_with(last)) continue;
      bool ok = true;
      for (std::size_t k = 1; k <= key_len && ok; ++k) ok = tw[p - k] == pw[pw.size() - 1 - k];
      if (!ok) continue;
      std::string out;
      std::size_t emitted = 0;
      if (tw[p].size() > last.size()) {
        out.append(tw[p].substr(last.size()));
        ++emitted;
      }
      for (std::size_t q = p + 1; q < tw.size() && emitted < max_words; ++q, ++emitted) {
        out += ' ';
        out.append(tw[q]);
      }
      return out;
    }
  }
  return std::nullopt;
}

std::string add_noise(std::string_view text, double p, std::uint64_t seed) {
  std::mt19937_64 rng(mix(seed, text));
  std::bernoulli_distribution flip(p);
  std::string out;
  for (auto w : split_words(text)) {
    if (!out.empty()) out += ' ';
    if (flip(rng)) out += fmt::format("qx{:x}", rng());
    else out.append(w);
  }
  return out;
}

struct MockServer::Impl {
  httplib::Server server;
  std::thread thread;
  std::vector<std::string> texts;
  mutable std::mutex mutex;
  MockBehavior behavior;
  std::vector<LoggedRequest> log;
  std::size_t served = 0;
  std::size_t seen = 0;

  std::string generate(std::string_view prompt, std::size_t max_tokens, const MockBehavior& b) {
    switch (b.kind) {
      case MockKind::fixed_string: return b.fixed_text;
      case MockKind::lookup: {
        auto it = b.table.find(std::string(prompt));
        return it == b.table.end() ? std::string() : it->second;
      }
      case MockKind::echo_truth: return truth_continuation(texts, prompt, max_tokens).value_or("");
      case MockKind::truth_with_noise:
        return add_noise(truth_continuation(texts, prompt, max_tokens).value_or(""), b.noise_p, b.seed);
    }
    return {};
  }

  void handle(const httplib::Request& req, httplib::Response& res, bool chat) {
    MockBehavior b;
    std::size_t index = 0;
    {
      std::lock_guard lock(mutex);
      log.push_back({req.path, req.body});
      b = behavior;
      index = seen++;
    }
    auto fail = [&](int status, const std::string& msg) {
      res.status = status;
      res.set_content(nlohmann::json{{"error", {{"message", msg}}}}.dump(), "application/json");
    };
    if (index < b.fail_first) return fail(500, "injected failure");
    {
      std::lock_guard lock(mutex);
      if (b.fail_after && served >= *b.fail_after) return fail(500, "injected failure");
    }
    auto body = nlohmann::json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object()) return fail(400, "body is not a JSON object");
    std::string prompt;
    if (chat) {
      if (!body.contains("messages") || !body["messages"].is_array() || body["messages"].empty())
        return fail(400, "messages missing");
      const auto& lastmsg = body["messages"].back();
      if (!lastmsg.contains("content") || !lastmsg["content"].is_string()) return fail(400, "bad message");
      prompt = lastmsg["content"].get<std::string>();
    } else {
      if (!body.contains("prompt") || !body["prompt"].is_string()) return fail(400, "prompt missing");
      prompt = body["prompt"].get<std::string>();
    }
    const std::size_t max_tokens = body.value("max_tokens", std::size_t{16});
    std::string text = generate(prompt, max_tokens, b);
    {
      std::lock_guard lock(mutex);
      ++served;
    }
    nlohmann::ordered_json out;
    out["id"] = fmt::format("mock-{}", index);
    out["object"] = chat ? "chat.completion" : "text_completion";
    out["model"] = body.value("model", "mock");
    nlohmann::ordered_json choice;
    choice["index"] = 0;
    if (chat) choice["message"] = {{"role", "assistant"}, {"content", text}};
    else choice["text"] = text;
    choice["finish_reason"] = "length";
    out["choices"] = nlohmann::ordered_json::array({choice});
    res.set_content(out.dump(), "application/json");
  }
};

MockServer::MockServer(MockBehavior behavior, std::vector<std::string> truth_texts, int port, std::string host)
    : impl_(std::make_unique<Impl>()), host_(std::move(host)) {
  impl_->behavior = std::move(behavior);
  impl_->texts = std::move(truth_texts);
  impl_->server.Post("/v1/completions",
                     [this](const httplib::Request& q, httplib::Response& r) { impl_->handle(q, r, false); });
  impl_->server.Post("/v1/chat/completions",
                     [this](const httplib::Request& q, httplib::Response& r) { impl_->handle(q, r, true); });
  // httplib's default adds SO_REUSEPORT, which would let a second server
  // share a port that is already taken.
  impl_->server.set_socket_options([](socket_t sock) {
    int yes = 1;
    ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });
  if (port == 0) {
    port_ = impl_->server.bind_to_any_port(host_);
    if (port_ < 0) throw MockServerError("cannot bind any port on " + host_);
  } else {
    if (!impl_->server.bind_to_port(host_, port)) throw MockServerError(fmt::format("port in use: {}", port));
    port_ = port;
  }
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

MockServer::~MockServer() { stop(); }

std::string MockServer::base_url() const { return fmt::format("http://{}:{}", host_, port_); }

void MockServer::set_behavior(MockBehavior behavior) {
  std::lock_guard lock(impl_->mutex);
  impl_->behavior = std::move(behavior);
  impl_->served = 0;
  impl_->seen = 0;
}

std::vector<LoggedRequest> MockServer::requests() const {
  std::lock_guard lock(impl_->mutex);
  return impl_->log;
}

void MockServer::clear_log() {
  std::lock_guard lock(impl_->mutex);
  impl_->log.clear();
}

void MockServer::wait() {
  if (impl_->thread.joinable()) impl_->thread.join();
}

void MockServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace memprobe
