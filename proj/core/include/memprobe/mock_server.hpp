#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace memprobe {

enum class MockKind { echo_truth, fixed_string, truth_with_noise, lookup };

struct MockBehavior {
  MockKind kind = MockKind::echo_truth;
  std::string fixed_text = "zzz";
  double noise_p = 0.0;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> table;  // lookup: prompt -> completion
  /// After this many successful completions every request gets HTTP 500.
  std::optional<std::size_t> fail_after;
  /// The first N requests get HTTP 500.
  std::size_t fail_first = 0;
};

MockBehavior parse_mock_behavior(std::string_view spec);

struct LoggedRequest {
  std::string path;
  std::string body;
};

class MockServerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The continuation of `prompt` found in `texts`, as `max_words` following
/// words joined by single spaces. The last prompt word may be a prefix of a
/// text word, in which case the remainder of that word comes first.
std::optional<std::string> truth_continuation(const std::vector<std::string>& texts, std::string_view prompt,
                                              std::size_t max_words);

/// Replaces each whitespace word with a fresh junk word with probability p.
std::string add_noise(std::string_view text, double p, std::uint64_t seed);

/// Serves the completions wire protocol on 127.0.0.1 from a background
/// thread and logs every request.
class MockServer {
 public:
  /// port 0 picks a free port. Throws MockServerError if the port is taken.
  MockServer(MockBehavior behavior, std::vector<std::string> truth_texts, int port = 0,
             std::string host = "127.0.0.1");
  ~MockServer();
  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  int port() const { return port_; }
  std::string base_url() const;

  void set_behavior(MockBehavior behavior);
  std::vector<LoggedRequest> requests() const;
  void clear_log();

  /// Blocks the calling thread until stop() is called.
  void wait();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
  std::string host_;
};

}  // namespace memprobe
