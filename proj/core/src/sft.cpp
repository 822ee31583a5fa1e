#include "memprobe/sft.hpp"

#include <algorithm>
#include <ostream>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>

#include "memprobe/extraction.hpp"

namespace memprobe {

std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound) {
  if (bound == 0) throw std::invalid_argument("uniform_below: empty range");
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    std::uint64_t r = rng();
    if (r >= threshold) return r % bound;
  }
}

std::vector<std::uint64_t> sample_without_replacement(std::uint64_t total, std::size_t n, std::uint64_t seed) {
  if (n > total) throw std::invalid_argument(fmt::format("cannot draw {} of {}", n, total));
  std::mt19937_64 rng(seed);
  std::unordered_map<std::uint64_t, std::uint64_t> moved;
  auto at = [&](std::uint64_t i) {
    auto it = moved.find(i);
    return it == moved.end() ? i : it->second;
  };
  std::vector<std::uint64_t> out;
  out.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::uint64_t j = i + uniform_below(rng, total - i);
    std::uint64_t vi = at(i), vj = at(j);
    moved[j] = vi;
    moved[i] = vj;
    out.push_back(vj);
  }
  return out;
}

std::vector<SftSample> build_sft_dataset(const Catalog& train_catalog, std::span<const std::string> extraction_ids,
                                         const Tokenizer& tok, const ChunkSpec& spec, const SftOptions& opts) {
  spec.validate();
  std::unordered_set<std::string_view> extraction(extraction_ids.begin(), extraction_ids.end());
  std::vector<std::string> shared;
  for (const auto& b : train_catalog.books)
    if (extraction.count(b.book_id)) shared.push_back(b.book_id);
  if (!shared.empty())
    throw SftError(fmt::format("training and extraction catalogs overlap: {}", fmt::join(shared, ", ")));

  std::vector<TokenizedBook> books;
  std::vector<std::uint64_t> offsets{0};  // prefix sums of chunk counts
  for (const auto& b : train_catalog.books) {
    if (b.trimmed && !b.usable) continue;
    TokenizedBook tb = tokenize_book(b, tok);
    const std::size_t n = chunk_count(tb.tokens.size(), spec);
    if (n == 0) continue;
    offsets.push_back(offsets.back() + n);
    books.push_back(std::move(tb));
  }
  const std::uint64_t total = offsets.back();
  if (opts.n_samples > total)
    throw SftError(fmt::format("requested {} samples but the training books hold only {} chunks", opts.n_samples,
                               total));

  const std::string system = opts.system_prompt.empty() ? std::string(kMemorySystemPrompt) : opts.system_prompt;
  std::vector<SftSample> out;
  out.reserve(opts.n_samples);
  for (std::uint64_t g : sample_without_replacement(total, opts.n_samples, opts.seed)) {
    auto it = std::upper_bound(offsets.begin(), offsets.end(), g);
    const std::size_t book = static_cast<std::size_t>(it - offsets.begin()) - 1;
    Chunk c = make_chunk(books[book], spec, static_cast<std::size_t>(g - offsets[book]));
    out.push_back({system, std::move(c.prefix_text), std::move(c.target_text), c.book_id, c.index});
  }
  return out;
}

void write_sft_jsonl(std::ostream& os, std::span<const SftSample> samples) {
  for (const auto& s : samples) {
    nlohmann::ordered_json j;
    j["messages"] = nlohmann::ordered_json::array({
        {{"role", "system"}, {"content", s.system}},
        {{"role", "user"}, {"content", s.user}},
        {{"role", "assistant"}, {"content", s.assistant}},
    });
    j["meta"] = {{"book_id", s.book_id}, {"chunk_index", s.chunk_index}};
    os << j.dump() << '\n';
  }
}

}  // namespace memprobe
