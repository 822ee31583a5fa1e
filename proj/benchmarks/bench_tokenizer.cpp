#include <benchmark/benchmark.h>

#include <random>

#include "memprobe/tokenization.hpp"

namespace {

using namespace memprobe;

std::string prose(std::size_t words) {
  static const char* kWords[] = {"the", "whale", "sea", "captain", "ship", "harpoon", "morning", "and", "of", "to"};
  std::mt19937_64 rng(1);
  std::string out;
  for (std::size_t i = 0; i < words; ++i) {
    if (i) out += rng() % 12 ? " " : ", ";
    out += kWords[rng() % 10];
  }
  return out;
}

// Byte-level vocabulary with a few dozen merges over the benchmark alphabet.
BpeTokenizer small_bpe() {
  std::unordered_map<std::string, TokenId> vocab;
  auto add = [&](const std::string& piece) { vocab.emplace(piece, static_cast<TokenId>(vocab.size())); };
  for (int b = 0; b < 256; ++b) add(byte_symbol(static_cast<unsigned char>(b)));
  std::vector<std::pair<std::string, std::string>> merges = {
      {"t", "h"}, {"th", "e"}, {"a", "n"}, {"an", "d"}, {"s", "e"}, {"se", "a"}, {"o", "f"}, {"t", "o"},
      {"h", "a"}, {"ha", "r"}, {"p", "o"}, {"po", "o"}, {"poo", "n"}, {byte_symbol(' '), "the"}};
  for (const auto& [a, b] : merges) add(a + b);
  return BpeTokenizer("bench", vocab, merges);
}

void BM_whitespace_encode(benchmark::State& state) {
  const auto text = prose(static_cast<std::size_t>(state.range(0)));
  WhitespaceTokenizer tok;
  for (auto _ : state) benchmark::DoNotOptimize(tok.encode(text));
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * text.size()));
}

void BM_bpe_encode(benchmark::State& state) {
  const auto text = prose(static_cast<std::size_t>(state.range(0)));
  const auto tok = small_bpe();
  for (auto _ : state) benchmark::DoNotOptimize(tok.encode(text));
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * text.size()));
}

}  // namespace

BENCHMARK(BM_whitespace_encode)->Arg(530)->Arg(20000);
BENCHMARK(BM_bpe_encode)->Arg(530)->Arg(20000);
