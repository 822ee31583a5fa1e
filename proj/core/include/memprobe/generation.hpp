#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "memprobe/tokenization.hpp"

namespace memprobe {

enum class PromptMode { raw, chat };
enum class GenerationMode { piecewise, autoregressive };

std::string_view to_string(PromptMode m);
std::string_view to_string(GenerationMode m);
PromptMode parse_prompt_mode(std::string_view s);
GenerationMode parse_generation_mode(std::string_view s);

/// Model output for one chunk (piecewise) or one whole run (autoregressive).
struct GenerationRecord {
  std::string book_id;
  std::size_t chunk_index = 0;  // run id for autoregressive records
  GenerationMode mode = GenerationMode::piecewise;
  PromptMode prompt_mode = PromptMode::raw;
  std::string generated_text;
  std::vector<TokenId> generated_ids;
  std::string model_name;
  double temperature = 0.0;
  std::size_t max_tokens = 0;
  std::string timestamp;  // ISO-8601 UTC
  std::size_t steps = 0;  // autoregressive steps completed
  bool truncated = false;  // autoregressive run stopped by an error
};

/// Ids are not persisted; readers re-encode generated_text.
void write_generation_jsonl(std::ostream& os, const GenerationRecord& r);
std::vector<GenerationRecord> read_generations_jsonl(std::istream& is, const Tokenizer& tok);

std::string utc_timestamp();

}  // namespace memprobe
