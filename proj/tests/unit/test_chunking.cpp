#include <doctest.h>

#include <random>
#include <sstream>

#include "memprobe/chunking.hpp"
#include "synthetic.hpp"

using namespace memprobe;

namespace {

// Every start offset whose full window fits, stepping by stride from 0.
std::size_t enumerate_offsets(std::size_t total, const ChunkSpec& spec) {
  std::size_t n = 0;
  for (std::size_t start = 0; start + spec.prefix_len + spec.target_len <= total; start += spec.stride) ++n;
  return n;
}

}  // namespace

TEST_CASE("default geometry counts") {
  ChunkSpec spec;
  CHECK(chunk_count(529, spec) == 0);
  CHECK(chunk_count(530, spec) == 1);
  CHECK(chunk_count(559, spec) == 1);
  CHECK(chunk_count(590, spec) == 3);
  CHECK(chunk_count(0, spec) == 0);
}

TEST_CASE("chunk count equals offset enumeration for random specs") {
  std::mt19937_64 rng(99);
  for (int s = 0; s < 50; ++s) {
    ChunkSpec spec{1 + rng() % 600, 1 + rng() % 60, 1 + rng() % 90};
    for (std::size_t t = 0; t < 2000; ++t) REQUIRE(chunk_count(t, spec) == enumerate_offsets(t, spec));
  }
}

TEST_CASE("chunks slice the token stream as windows") {
  WhitespaceTokenizer tok;
  auto book = testing::trimmed_book("b", testing::distinct_words(650, "t"));
  ChunkSpec spec;
  auto chunks = make_chunks(book, tok, spec);
  REQUIRE(chunks.size() == 5);
  const auto all = tok.encode(book.trimmed_text).ids;
  for (const auto& c : chunks) {
    CHECK(c.start_token == 30 * c.index);
    CHECK(c.prefix_ids.size() == 500);
    CHECK(c.target_ids.size() == 30);
    CHECK(std::equal(c.prefix_ids.begin(), c.prefix_ids.end(), all.begin() + c.start_token));
    CHECK(tok.decode(c.target_ids) == c.target_text);
    CHECK(c.prefix_text.starts_with("t" + std::to_string(c.start_token) + " "));
  }
  // stride == target_len: each target is the tail of the next prefix.
  for (std::size_t i = 0; i + 1 < chunks.size(); ++i) {
    CHECK(std::equal(chunks[i].target_ids.begin(), chunks[i].target_ids.end(), chunks[i + 1].prefix_ids.end() - 30));
  }
  CHECK(chunks.back().target_text.ends_with("t649"));
}

TEST_CASE("sliding-window consistency across random lengths") {
  WhitespaceTokenizer tok;
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    ChunkSpec spec{1 + rng() % 40, 1 + rng() % 10, 0};
    spec.stride = spec.target_len;
    const std::size_t n = rng() % 300;
    auto book = testing::trimmed_book("r", testing::random_words(n, trial, 20));
    auto chunks = make_chunks(book, tok, spec);
    REQUIRE(chunks.size() == chunk_count(n, spec));
    for (std::size_t i = 0; i + 1 < chunks.size(); ++i) {
      std::vector<TokenId> joined = chunks[i].prefix_ids;
      joined.insert(joined.end(), chunks[i].target_ids.begin(), chunks[i].target_ids.end());
      CHECK(std::vector<TokenId>(joined.begin() + static_cast<std::ptrdiff_t>(spec.stride), joined.end()) ==
            chunks[i + 1].prefix_ids);
    }
  }
}

TEST_CASE("unusable books and invalid specs") {
  WhitespaceTokenizer tok;
  BookRecord b = testing::trimmed_book("x", testing::random_words(600, 1));
  b.usable = false;
  CHECK(make_chunks(b, tok, {}).empty());
  CHECK_THROWS_AS(make_chunks(testing::trimmed_book("x", "a"), tok, ChunkSpec{0, 30, 30}), std::invalid_argument);
  auto tb = tokenize_book(testing::trimmed_book("y", testing::random_words(530, 1)), tok);
  CHECK_NOTHROW(make_chunk(tb, {}, 0));
  CHECK_THROWS_AS(make_chunk(tb, {}, 1), std::out_of_range);
}

TEST_CASE("chunk stats skip empty books") {
  auto s = chunk_stats({3, 0, 10, 7});
  CHECK(s.total == 20);
  CHECK(s.books == 3);
  CHECK(s.min_per_book == 3);
  CHECK(s.max_per_book == 10);
  CHECK(chunk_stats({}).books == 0);
}

TEST_CASE("chunks.jsonl round trip keeps text and re-derives ids") {
  WhitespaceTokenizer tok;
  auto book = testing::trimmed_book("b", testing::random_words(600, 8));
  auto chunks = make_chunks(book, tok, {});
  std::stringstream ss;
  for (const auto& c : chunks) write_chunk_jsonl(ss, c);
  auto back = read_chunks_jsonl(ss, tok);
  REQUIRE(back.size() == chunks.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].book_id == chunks[i].book_id);
    CHECK(back[i].index == chunks[i].index);
    CHECK(back[i].start_token == chunks[i].start_token);
    CHECK(back[i].prefix_text == chunks[i].prefix_text);
    CHECK(back[i].target_ids == chunks[i].target_ids);
  }
  std::stringstream bad("not json\n");
  CHECK_THROWS(read_chunks_jsonl(bad, tok));
}
