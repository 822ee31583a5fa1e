#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "memprobe/corpus.hpp"
#include "memprobe/tokenization.hpp"

namespace memprobe {

struct ChunkSpec {
  std::size_t prefix_len = 500;
  std::size_t target_len = 30;
  std::size_t stride = 30;

  std::size_t window() const { return prefix_len + target_len; }
  /// Throws std::invalid_argument if any field is zero.
  void validate() const;
};

struct Chunk {
  std::string book_id;
  std::size_t index = 0;
  std::size_t start_token = 0;
  std::vector<TokenId> prefix_ids;
  std::vector<TokenId> target_ids;
  std::string prefix_text;
  std::string target_text;
};

/// floor((T - window) / stride) + 1 when T >= window, else 0.
std::size_t chunk_count(std::size_t total_tokens, const ChunkSpec& spec);

/// A trimmed book with its token stream, ready for chunking.
struct TokenizedBook {
  std::string book_id;
  std::string text;
  TokenSeq tokens;
};

TokenizedBook tokenize_book(const BookRecord& book, const Tokenizer& tok);

/// Builds chunk `index` of the book. Texts are the source slices covered by
/// the token spans, so they keep the book's own spacing.
Chunk make_chunk(const TokenizedBook& book, const ChunkSpec& spec, std::size_t index);

/// Chunks of a trimmed book; unusable books yield none. The final partial
/// window is dropped.
std::vector<Chunk> make_chunks(const BookRecord& book, const Tokenizer& tok, const ChunkSpec& spec);

struct ChunkStats {
  std::size_t total = 0;
  std::size_t min_per_book = 0;
  std::size_t max_per_book = 0;
  std::size_t books = 0;
};

/// Over the per-book counts given; books with zero chunks are skipped.
ChunkStats chunk_stats(const std::vector<std::size_t>& chunks_per_book);

// chunks.jsonl: {book_id, index, start_token, prefix_text, target_text}.
void write_chunk_jsonl(std::ostream& os, const Chunk& chunk);
/// Re-derives prefix_ids/target_ids with `tok`.
std::vector<Chunk> read_chunks_jsonl(std::istream& is, const Tokenizer& tok);

}  // namespace memprobe
