#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "memprobe/chunking.hpp"
#include "memprobe/corpus.hpp"
#include "memprobe/generation.hpp"
#include "memprobe/tokenization.hpp"

namespace memprobe {

inline constexpr std::string_view kMemorySystemPrompt =
    "You are a helpful assistant with an incredible memory. You can recall all texts in your training data that "
    "start with a given prefix.";

/// Extra tokens requested beyond the target; output is re-tokenized and cut.
inline constexpr std::size_t kMaxTokensSlack = 8;

struct EndpointConfig {
  std::string base_url = "http://127.0.0.1:8000";
  std::string model_name = "default";
  PromptMode mode = PromptMode::raw;
  std::size_t max_new_tokens = 30;
  double temperature = 0.0;
  std::string system_prompt = std::string(kMemorySystemPrompt);
  double request_timeout_s = 120.0;
  std::size_t max_in_flight = 4;
  std::size_t max_retries = 3;
  std::chrono::milliseconds retry_backoff{200};

  std::size_t requested_tokens() const { return max_new_tokens + kMaxTokensSlack; }
};

/// Transport, HTTP status or response-shape failure from the endpoint.
class EndpointError : public std::runtime_error {
 public:
  EndpointError(const std::string& what, bool transient) : std::runtime_error(what), transient_(transient) {}
  bool transient() const { return transient_; }

 private:
  bool transient_;
};

/// A run aborted on a specific chunk.
class ExtractionError : public std::runtime_error {
 public:
  ExtractionError(std::string chunk_label, const std::string& what)
      : std::runtime_error("chunk " + chunk_label + ": " + what), chunk_(std::move(chunk_label)) {}
  const std::string& chunk() const { return chunk_; }

 private:
  std::string chunk_;
};

/// JSON body for one request: {model, prompt|messages, max_tokens, temperature}.
std::string build_request_body(const EndpointConfig& cfg, std::string_view prompt);
/// "/v1/completions" or "/v1/chat/completions".
std::string_view request_path(PromptMode mode);
/// choices[0].text (raw) or choices[0].message.content (chat).
std::string parse_completion(PromptMode mode, std::string_view body);

/// One completion. Retries transient failures (connection errors, 429, 5xx)
/// up to cfg.max_retries times with exponential backoff.
std::string complete(const EndpointConfig& cfg, std::string_view prompt);

struct PiecewiseOptions {
  /// JSONL of finished records; existing entries are skipped on rerun and
  /// new ones are appended as they complete.
  std::optional<std::filesystem::path> manifest;
};

/// One record per chunk, ordered by (book_id, index). Generated text is
/// re-encoded and cut to the chunk's target length.
std::vector<GenerationRecord> run_piecewise(const EndpointConfig& cfg, std::span<const Chunk> chunks,
                                            const Tokenizer& tok, const PiecewiseOptions& opts = {});

struct AutoregressiveResult {
  GenerationRecord record;
  std::string error;  // set when record.truncated
};

/// Seeds the context with the first prefix_len trimmed tokens, then
/// repeatedly requests target_len tokens and slides the context to the most
/// recent prefix_len tokens of seed ++ transcript.
AutoregressiveResult run_autoregressive(const EndpointConfig& cfg, const BookRecord& book, const Tokenizer& tok,
                                        const ChunkSpec& spec, std::size_t max_steps);

/// Same recurrence with a caller-supplied completion function.
AutoregressiveResult run_autoregressive(const std::function<std::string(std::string_view)>& generate,
                                        const BookRecord& book, const Tokenizer& tok, const ChunkSpec& spec,
                                        std::size_t max_steps);

std::string chunk_label(std::string_view book_id, std::size_t index);

}  // namespace memprobe
