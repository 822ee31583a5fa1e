#include <doctest.h>

#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "memprobe/extraction.hpp"
#include "memprobe/sft.hpp"
#include "synthetic.hpp"

using namespace memprobe;

namespace {

// 4 books of 9,530 words: 301 chunks each at the default geometry.
Catalog training_catalog() {
  Catalog cat;
  for (int k = 0; k < 4; ++k)
    cat.books.push_back(testing::trimmed_book("train" + std::to_string(k), testing::random_words(9530, 500 + k)));
  return cat;
}

}  // namespace

TEST_CASE("uniform_below is unbiased on small ranges and reproducible") {
  std::mt19937_64 rng(1);
  std::array<int, 6> counts{};
  for (int i = 0; i < 60000; ++i) counts[uniform_below(rng, 6)]++;
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
  std::mt19937_64 a(5), b(5);
  for (int i = 0; i < 100; ++i) CHECK(uniform_below(a, 1000003) == uniform_below(b, 1000003));
  CHECK_THROWS(uniform_below(rng, 0));
}

TEST_CASE("sampling without replacement yields distinct in-range values") {
  auto draw = sample_without_replacement(50, 50, 3);
  CHECK(std::set<std::uint64_t>(draw.begin(), draw.end()).size() == 50);
  CHECK(*std::max_element(draw.begin(), draw.end()) == 49);
  CHECK(sample_without_replacement(1'000'000'000, 5, 9) == sample_without_replacement(1'000'000'000, 5, 9));
  CHECK(sample_without_replacement(10, 0, 1).empty());
  CHECK_THROWS(sample_without_replacement(3, 4, 1));
}

TEST_CASE("dataset sizes, token lengths and the system string") {
  WhitespaceTokenizer tok;
  const auto cat = training_catalog();
  ChunkSpec spec;
  for (std::size_t n : {0u, 500u, 1000u}) {
    SftOptions opts;
    opts.n_samples = n;
    opts.seed = 7;
    auto samples = build_sft_dataset(cat, {}, tok, spec, opts);
    REQUIRE(samples.size() == n);
    std::set<std::pair<std::string, std::size_t>> seen;
    for (const auto& s : samples) {
      CHECK(s.system == "You are a helpful assistant with an incredible memory. You can recall all texts in your "
                        "training data that start with a given prefix.");
      CHECK(tok.count(s.user) == 500);
      CHECK(tok.count(s.assistant) == 30);
      CHECK(seen.insert({s.book_id, s.chunk_index}).second);
    }
  }
}

TEST_CASE("samples are the chunks they claim to be") {
  WhitespaceTokenizer tok;
  const auto cat = training_catalog();
  SftOptions opts;
  opts.n_samples = 20;
  auto samples = build_sft_dataset(cat, {}, tok, {}, opts);
  for (const auto& s : samples) {
    auto chunks = make_chunks(*cat.find(s.book_id), tok, {});
    CHECK(chunks.at(s.chunk_index).prefix_text == s.user);
    CHECK(chunks.at(s.chunk_index).target_text == s.assistant);
  }
}

TEST_CASE("seed determinism and sensitivity") {
  WhitespaceTokenizer tok;
  const auto cat = training_catalog();
  SftOptions opts;
  opts.n_samples = 500;
  opts.seed = 7;
  auto render = [&](const SftOptions& o) {
    std::ostringstream os;
    auto s = build_sft_dataset(cat, {}, tok, {}, o);
    write_sft_jsonl(os, s);
    return os.str();
  };
  const auto first = render(opts);
  CHECK(first == render(opts));
  opts.seed = 8;
  CHECK(first != render(opts));
}

TEST_CASE("overlap with the extraction catalog and oversized requests are errors") {
  WhitespaceTokenizer tok;
  const auto cat = training_catalog();
  std::vector<std::string> extraction = {"other", "train2", "train0"};
  CHECK_THROWS_WITH_AS(build_sft_dataset(cat, extraction, tok, {}, {}),
                       "training and extraction catalogs overlap: train0, train2", SftError);
  SftOptions opts;
  opts.n_samples = 1205;
  CHECK_THROWS_WITH_AS(build_sft_dataset(cat, {}, tok, {}, opts),
                       "requested 1205 samples but the training books hold only 1204 chunks", SftError);
}

TEST_CASE("jsonl records carry three messages and meta") {
  SftSample s{"sys", "prefix words", "target", "b", 3};
  std::ostringstream os;
  write_sft_jsonl(os, std::span(&s, 1));
  auto j = nlohmann::json::parse(os.str());
  CHECK(j["messages"].size() == 3);
  CHECK(j["messages"][0] == nlohmann::json{{"role", "system"}, {"content", "sys"}});
  CHECK(j["messages"][1]["role"] == "user");
  CHECK(j["messages"][2] == nlohmann::json{{"role", "assistant"}, {"content", "target"}});
  CHECK(j["meta"] == nlohmann::json{{"book_id", "b"}, {"chunk_index", 3}});
  CHECK(os.str().back() == '\n');
}
