#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "memprobe/chunking.hpp"
#include "memprobe/corpus.hpp"
#include "memprobe/tokenization.hpp"

namespace memprobe {

struct SftSample {
  std::string system;
  std::string user;       // prefix text
  std::string assistant;  // target text
  std::string book_id;
  std::size_t chunk_index = 0;
};

class SftError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unbiased draw from [0, bound) by rejection on raw 64-bit output, so the
/// stream is reproducible across standard libraries.
std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound);

/// n distinct values from [0, total) in draw order (sparse Fisher–Yates).
std::vector<std::uint64_t> sample_without_replacement(std::uint64_t total, std::size_t n, std::uint64_t seed);

struct SftOptions {
  std::size_t n_samples = 1000;
  std::uint64_t seed = 0;
  std::string system_prompt;  // defaults to the memory-assistant prompt when empty
};

/// Chunk-uniform sample over every chunk of the (trimmed) training books.
/// Throws SftError when a training book also appears in `extraction_ids`
/// or when fewer than n_samples chunks exist.
std::vector<SftSample> build_sft_dataset(const Catalog& train_catalog, std::span<const std::string> extraction_ids,
                                         const Tokenizer& tok, const ChunkSpec& spec, const SftOptions& opts);

/// {"messages":[system,user,assistant], "meta":{book_id, chunk_index}} per line.
void write_sft_jsonl(std::ostream& os, std::span<const SftSample> samples);

}  // namespace memprobe
