#include "memprobe/generation.hpp"

#include <chrono>
#include <istream>
#include <ostream>
#include <stdexcept>

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace memprobe {

std::string_view to_string(PromptMode m) { return m == PromptMode::raw ? "raw" : "chat"; }

std::string_view to_string(GenerationMode m) {
  return m == GenerationMode::piecewise ? "piecewise" : "autoregressive";
}

PromptMode parse_prompt_mode(std::string_view s) {
  if (s == "raw") return PromptMode::raw;
  if (s == "chat") return PromptMode::chat;
  throw std::invalid_argument(fmt::format("unknown prompt mode '{}' (expected raw|chat)", s));
}

GenerationMode parse_generation_mode(std::string_view s) {
  if (s == "piecewise") return GenerationMode::piecewise;
  if (s == "autoregressive") return GenerationMode::autoregressive;
  throw std::invalid_argument(fmt::format("unknown generation mode '{}'", s));
}

std::string utc_timestamp() {
  auto now = std::chrono::time_point_cast<std::chrono::seconds>(std::chrono::system_clock::now());
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::chrono::system_clock::to_time_t(now)));
}

void write_generation_jsonl(std::ostream& os, const GenerationRecord& r) {
  nlohmann::ordered_json j;
  j["book_id"] = r.book_id;
  j["chunk_index"] = r.chunk_index;
  j["mode"] = to_string(r.mode);
  j["prompt_mode"] = to_string(r.prompt_mode);
  j["generated_text"] = r.generated_text;
  j["n_generated_tokens"] = r.generated_ids.size();
  j["model"] = r.model_name;
  j["temperature"] = r.temperature;
  j["max_tokens"] = r.max_tokens;
  j["timestamp"] = r.timestamp;
  if (r.mode == GenerationMode::autoregressive) {
    j["steps"] = r.steps;
    j["truncated"] = r.truncated;
  }
  os << j.dump() << '\n';
}

std::vector<GenerationRecord> read_generations_jsonl(std::istream& is, const Tokenizer& tok) {
  std::vector<GenerationRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      GenerationRecord r;
      r.book_id = j.at("book_id").get<std::string>();
      r.chunk_index = j.at("chunk_index").get<std::size_t>();
      r.mode = parse_generation_mode(j.at("mode").get<std::string>());
      r.prompt_mode = parse_prompt_mode(j.at("prompt_mode").get<std::string>());
      r.generated_text = j.at("generated_text").get<std::string>();
      r.model_name = j.value("model", "");
      r.temperature = j.value("temperature", 0.0);
      r.max_tokens = j.value("max_tokens", std::size_t{0});
      r.timestamp = j.value("timestamp", "");
      r.steps = j.value("steps", std::size_t{0});
      r.truncated = j.value("truncated", false);
      r.generated_ids = tok.encode(r.generated_text).ids;
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::runtime_error(fmt::format("generations line {}: {}", lineno, e.what()));
    }
  }
  return out;
}

}  // namespace memprobe
