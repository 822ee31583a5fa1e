#include "memprobe/chunking.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <stdexcept>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace memprobe {

void ChunkSpec::validate() const {
  if (prefix_len == 0 || target_len == 0 || stride == 0)
    throw std::invalid_argument(
        fmt::format("chunk spec needs positive lengths (prefix {}, target {}, stride {})", prefix_len, target_len, stride));
}

std::size_t chunk_count(std::size_t total_tokens, const ChunkSpec& spec) {
  if (total_tokens < spec.window()) return 0;
  return (total_tokens - spec.window()) / spec.stride + 1;
}

TokenizedBook tokenize_book(const BookRecord& book, const Tokenizer& tok) {
  TokenizedBook out;
  out.book_id = book.book_id;
  out.text = book.trimmed_text;
  if (book.usable || !book.trimmed) out.tokens = tok.encode(out.text);
  return out;
}

namespace {

std::string slice(const TokenizedBook& book, std::size_t first, std::size_t count) {
  if (count == 0) return {};
  const auto& spans = book.tokens.source_spans;
  std::size_t begin = spans[first].begin;
  std::size_t end = spans[first + count - 1].end;
  return book.text.substr(begin, end - begin);
}

}  // namespace

Chunk make_chunk(const TokenizedBook& book, const ChunkSpec& spec, std::size_t index) {
  const std::size_t start = index * spec.stride;
  if (start + spec.window() > book.tokens.size())
    throw std::out_of_range(fmt::format("chunk {} of '{}' runs past the token stream", index, book.book_id));
  const auto& ids = book.tokens.ids;
  Chunk c;
  c.book_id = book.book_id;
  c.index = index;
  c.start_token = start;
  c.prefix_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(start),
                      ids.begin() + static_cast<std::ptrdiff_t>(start + spec.prefix_len));
  c.target_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(start + spec.prefix_len),
                      ids.begin() + static_cast<std::ptrdiff_t>(start + spec.window()));
  c.prefix_text = slice(book, start, spec.prefix_len);
  c.target_text = slice(book, start + spec.prefix_len, spec.target_len);
  return c;
}

std::vector<Chunk> make_chunks(const BookRecord& book, const Tokenizer& tok, const ChunkSpec& spec) {
  spec.validate();
  if (book.trimmed && !book.usable) return {};
  TokenizedBook tb = tokenize_book(book, tok);
  const std::size_t n = chunk_count(tb.tokens.size(), spec);
  std::vector<Chunk> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_chunk(tb, spec, i));
  return out;
}

ChunkStats chunk_stats(const std::vector<std::size_t>& chunks_per_book) {
  ChunkStats s;
  for (std::size_t n : chunks_per_book) {
    if (n == 0) continue;
    s.min_per_book = s.books == 0 ? n : std::min(s.min_per_book, n);
    s.max_per_book = std::max(s.max_per_book, n);
    s.total += n;
    ++s.books;
  }
  return s;
}

void write_chunk_jsonl(std::ostream& os, const Chunk& chunk) {
  nlohmann::ordered_json j;
  j["book_id"] = chunk.book_id;
  j["index"] = chunk.index;
  j["start_token"] = chunk.start_token;
  j["prefix_text"] = chunk.prefix_text;
  j["target_text"] = chunk.target_text;
  os << j.dump() << '\n';
}

std::vector<Chunk> read_chunks_jsonl(std::istream& is, const Tokenizer& tok) {
  std::vector<Chunk> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      Chunk c;
      c.book_id = j.at("book_id").get<std::string>();
      c.index = j.at("index").get<std::size_t>();
      c.start_token = j.at("start_token").get<std::size_t>();
      c.prefix_text = j.at("prefix_text").get<std::string>();
      c.target_text = j.at("target_text").get<std::string>();
      c.prefix_ids = tok.encode(c.prefix_text).ids;
      c.target_ids = tok.encode(c.target_text).ids;
      out.push_back(std::move(c));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(fmt::format("chunks.jsonl line {}: {}", lineno, e.what()));
    }
  }
  return out;
}

}  // namespace memprobe
