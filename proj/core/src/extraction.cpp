#include "memprobe/extraction.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include <fmt/format.h>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "memprobe/parallel.hpp"

namespace memprobe {
namespace {

struct UrlParts {
  std::string scheme_host_port;
  std::string path_prefix;
};

UrlParts split_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw EndpointError("endpoint url '" + url + "' lacks a scheme", false);
  auto path_start = url.find('/', scheme_end + 3);
  UrlParts parts;
  parts.scheme_host_port = url.substr(0, path_start);
  if (path_start != std::string::npos) {
    parts.path_prefix = url.substr(path_start);
    while (!parts.path_prefix.empty() && parts.path_prefix.back() == '/') parts.path_prefix.pop_back();
  }
  return parts;
}

bool transient_status(int status) { return status == 408 || status == 429 || status >= 500; }

std::string complete_once(const EndpointConfig& cfg, std::string_view prompt) {
  UrlParts url = split_url(cfg.base_url);
  httplib::Client client(url.scheme_host_port);
  if (!client.is_valid()) throw EndpointError("unsupported endpoint url '" + cfg.base_url + "'", false);
  auto timeout = std::chrono::duration<double>(cfg.request_timeout_s);
  auto us = std::chrono::duration_cast<std::chrono::microseconds>(timeout).count();
  client.set_connection_timeout(us / 1000000, us % 1000000);
  client.set_read_timeout(us / 1000000, us % 1000000);
  client.set_write_timeout(us / 1000000, us % 1000000);

  const std::string path = url.path_prefix + std::string(request_path(cfg.mode));
  auto res = client.Post(path, build_request_body(cfg, prompt), "application/json");
  if (!res) throw EndpointError(fmt::format("POST {} failed: {}", path, httplib::to_string(res.error())), true);
  if (res->status != 200) {
    throw EndpointError(fmt::format("POST {} returned HTTP {}", path, res->status), transient_status(res->status));
  }
  return parse_completion(cfg.mode, res->body);
}

std::vector<TokenId> truncate_ids(std::vector<TokenId> ids, std::size_t n) {
  if (ids.size() > n) ids.resize(n);
  return ids;
}

}  // namespace

std::string chunk_label(std::string_view book_id, std::size_t index) { return fmt::format("{}#{}", book_id, index); }

std::string_view request_path(PromptMode mode) {
  return mode == PromptMode::raw ? "/v1/completions" : "/v1/chat/completions";
}

std::string build_request_body(const EndpointConfig& cfg, std::string_view prompt) {
  nlohmann::ordered_json j;
  j["model"] = cfg.model_name;
  if (cfg.mode == PromptMode::raw) {
    j["prompt"] = prompt;
  } else {
    j["messages"] = nlohmann::ordered_json::array({
        {{"role", "system"}, {"content", cfg.system_prompt}},
        {{"role", "user"}, {"content", prompt}},
    });
  }
  j["max_tokens"] = cfg.requested_tokens();
  j["temperature"] = cfg.temperature;
  return j.dump();
}

std::string parse_completion(PromptMode mode, std::string_view body) {
  nlohmann::json j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded()) throw EndpointError("malformed response body: not JSON", false);
  const nlohmann::json* choice = nullptr;
  if (j.is_object() && j.contains("choices") && j["choices"].is_array() && !j["choices"].empty())
    choice = &j["choices"][0];
  if (!choice || !choice->is_object()) throw EndpointError("malformed response body: no choices[0]", false);
  if (mode == PromptMode::raw) {
    if (!choice->contains("text") || !(*choice)["text"].is_string())
      throw EndpointError("malformed response body: choices[0].text missing", false);
    return (*choice)["text"].get<std::string>();
  }
  if (!choice->contains("message") || !(*choice)["message"].is_object() ||
      !(*choice)["message"].contains("content") || !(*choice)["message"]["content"].is_string())
    throw EndpointError("malformed response body: choices[0].message.content missing", false);
  return (*choice)["message"]["content"].get<std::string>();
}

std::string complete(const EndpointConfig& cfg, std::string_view prompt) {
  auto delay = cfg.retry_backoff;
  for (std::size_t attempt = 0;; ++attempt) {
    try {
      return complete_once(cfg, prompt);
    } catch (const EndpointError& e) {
      if (!e.transient() || attempt >= cfg.max_retries) {
        if (attempt == 0) throw;
        throw EndpointError(fmt::format("{} (after {} retries)", e.what(), attempt), e.transient());
      }
    }
    std::this_thread::sleep_for(delay);
    delay *= 2;
  }
}

std::vector<GenerationRecord> run_piecewise(const EndpointConfig& cfg, std::span<const Chunk> chunks,
                                            const Tokenizer& tok, const PiecewiseOptions& opts) {
  if (chunks.empty()) throw std::invalid_argument("run_piecewise needs at least one chunk");

  std::vector<GenerationRecord> done;
  std::set<std::pair<std::string, std::size_t>> completed;
  std::ofstream manifest;
  if (opts.manifest) {
    if (std::filesystem::exists(*opts.manifest)) {
      std::ifstream in(*opts.manifest);
      for (auto& r : read_generations_jsonl(in, tok)) {
        if (completed.insert({r.book_id, r.chunk_index}).second) done.push_back(std::move(r));
      }
    }
    manifest.open(*opts.manifest, std::ios::app);
    if (!manifest) throw std::runtime_error("cannot open run manifest " + opts.manifest->string());
  }

  std::vector<const Chunk*> todo;
  for (const auto& c : chunks)
    if (!completed.count({c.book_id, c.index})) todo.push_back(&c);

  std::vector<GenerationRecord> fresh(todo.size());
  std::mutex manifest_mutex;
  parallel_for(todo.size(), cfg.max_in_flight, [&](std::size_t k) {
    const Chunk& c = *todo[k];
    std::string text;
    try {
      text = complete(cfg, c.prefix_text);
    } catch (const EndpointError& e) {
      throw ExtractionError(chunk_label(c.book_id, c.index), e.what());
    }
    GenerationRecord r;
    r.book_id = c.book_id;
    r.chunk_index = c.index;
    r.mode = GenerationMode::piecewise;
    r.prompt_mode = cfg.mode;
    const std::size_t target_len = c.target_ids.empty() ? cfg.max_new_tokens : c.target_ids.size();
    r.generated_ids = truncate_ids(tok.encode(text).ids, target_len);
    r.generated_text = tok.decode(r.generated_ids);
    r.model_name = cfg.model_name;
    r.temperature = cfg.temperature;
    r.max_tokens = cfg.requested_tokens();
    r.timestamp = utc_timestamp();
    if (manifest.is_open()) {
      std::lock_guard lock(manifest_mutex);
      write_generation_jsonl(manifest, r);
      manifest.flush();
    }
    fresh[k] = std::move(r);
  });

  for (auto& r : fresh) done.push_back(std::move(r));
  std::stable_sort(done.begin(), done.end(), [](const GenerationRecord& a, const GenerationRecord& b) {
    return std::tie(a.book_id, a.chunk_index) < std::tie(b.book_id, b.chunk_index);
  });
  return done;
}

AutoregressiveResult run_autoregressive(const std::function<std::string(std::string_view)>& generate,
                                        const BookRecord& book, const Tokenizer& tok, const ChunkSpec& spec,
                                        std::size_t max_steps) {
  spec.validate();
  TokenSeq trimmed = tok.encode(book.trimmed_text);
  if (trimmed.size() < spec.prefix_len)
    throw std::invalid_argument(fmt::format("book '{}' has {} trimmed tokens, fewer than the {}-token seed",
                                            book.book_id, trimmed.size(), spec.prefix_len));
  const std::size_t budget = trimmed.size() - spec.prefix_len;

  std::vector<TokenId> context(trimmed.ids.begin(), trimmed.ids.begin() + static_cast<std::ptrdiff_t>(spec.prefix_len));
  std::vector<TokenId> transcript;
  AutoregressiveResult result;
  GenerationRecord& r = result.record;
  r.book_id = book.book_id;
  r.chunk_index = 0;
  r.mode = GenerationMode::autoregressive;

  for (std::size_t step = 0; step < max_steps && transcript.size() < budget; ++step) {
    std::string text;
    try {
      text = generate(tok.decode(context));
    } catch (const std::exception& e) {
      r.truncated = true;
      result.error = fmt::format("step {}: {}", step, e.what());
      break;
    }
    auto ids = truncate_ids(tok.encode(text).ids, spec.target_len);
    ++r.steps;
    if (ids.empty()) break;  // greedy decoding would repeat the empty step forever
    transcript.insert(transcript.end(), ids.begin(), ids.end());
    context.insert(context.end(), ids.begin(), ids.end());
    if (context.size() > spec.prefix_len)
      context.erase(context.begin(), context.end() - static_cast<std::ptrdiff_t>(spec.prefix_len));
  }
  r.generated_ids = std::move(transcript);
  r.generated_text = tok.decode(r.generated_ids);
  r.timestamp = utc_timestamp();
  return result;
}

AutoregressiveResult run_autoregressive(const EndpointConfig& cfg, const BookRecord& book, const Tokenizer& tok,
                                        const ChunkSpec& spec, std::size_t max_steps) {
  EndpointConfig step_cfg = cfg;
  step_cfg.max_new_tokens = spec.target_len;
  auto result = run_autoregressive([&](std::string_view prompt) { return complete(step_cfg, prompt); }, book, tok,
                                   spec, max_steps);
  result.record.prompt_mode = cfg.mode;
  result.record.model_name = cfg.model_name;
  result.record.temperature = cfg.temperature;
  result.record.max_tokens = step_cfg.requested_tokens();
  return result;
}

}  // namespace memprobe
