#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace memprobe {

using TokenId = std::uint32_t;

/// Half-open byte range [begin, end) into the text a token was read from.
struct ByteSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool operator==(const ByteSpan&) const = default;
};

struct TokenSeq {
  std::string tokenizer_name;
  std::vector<TokenId> ids;
  std::vector<ByteSpan> source_spans;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
};

class TokenizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tokenizer contract shared by trimming, chunking, prompting and length
/// accounting. Implementations are safe to call concurrently.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;

  virtual std::string name() const = 0;
  virtual TokenSeq encode(std::string_view text) const = 0;
  /// Throws TokenizerError naming the index of the first invalid id.
  virtual std::string decode(std::span<const TokenId> ids) const = 0;

  /// Surface strings of each token, used for model-token metric units.
  virtual std::vector<std::string> pieces(std::span<const TokenId> ids) const;

  std::size_t count(std::string_view text) const { return encode(text).size(); }
};

/// Splits on ASCII whitespace. Ids are interned on first sight, so they are
/// stable within one process for a fixed processing order; decode joins
/// words with single spaces.
class WhitespaceTokenizer final : public Tokenizer {
 public:
  std::string name() const override { return "whitespace"; }
  TokenSeq encode(std::string_view text) const override;
  std::string decode(std::span<const TokenId> ids) const override;
  std::vector<std::string> pieces(std::span<const TokenId> ids) const override;

 private:
  TokenId intern(std::string_view word) const;

  mutable std::shared_mutex mutex_;
  mutable std::unordered_map<std::string, TokenId> ids_;
  mutable std::vector<std::string> words_;
};

/// Byte-pair-encoding tokenizer loaded from a JSON vocabulary
/// (token string -> id) and an ordered merges file (rank = line order).
///
/// Two symbol alphabets are supported. If the vocabulary uses the GPT-2
/// byte-to-unicode alphabet (it contains "Ġ"), every input byte is mapped
/// through that table before merging. Otherwise the initial symbols are
/// UTF-8 characters; characters missing from the vocabulary fall back to
/// "<0xNN>" byte tokens when those exist, and are an error when they don't.
///
/// Text is pre-split into pieces (an optional single leading space followed
/// by a run of letters, digits or punctuation; or a whitespace run). Merges
/// never cross piece boundaries. Inside a piece the lowest-rank adjacent pair
/// is merged first, leftmost on ties.
class BpeTokenizer final : public Tokenizer {
 public:
  BpeTokenizer(std::string name,
               std::unordered_map<std::string, TokenId> vocab,
               std::vector<std::pair<std::string, std::string>> merges);

  static BpeTokenizer from_files(const std::filesystem::path& vocab_json,
                                 const std::filesystem::path& merges_txt);

  std::string name() const override { return name_; }
  TokenSeq encode(std::string_view text) const override;
  std::string decode(std::span<const TokenId> ids) const override;
  std::vector<std::string> pieces(std::span<const TokenId> ids) const override;

  bool byte_level() const { return byte_level_; }
  std::size_t vocab_size() const { return vocab_.size(); }

 private:
  struct Symbol {
    std::string text;
    ByteSpan span;
  };

  void encode_piece(std::string_view text, std::size_t base, TokenSeq& out) const;
  std::vector<Symbol> initial_symbols(std::string_view piece, std::size_t base) const;
  std::string surface_bytes(TokenId id) const;

  std::string name_;
  std::unordered_map<std::string, TokenId> vocab_;
  std::vector<std::string> id_to_token_;
  std::map<std::pair<std::string, std::string>, std::size_t> merge_rank_;
  bool byte_level_ = false;
};

/// Splits text into (possibly space-prefixed) pieces; exposed for tests.
std::vector<ByteSpan> pretokenize(std::string_view text);

/// GPT-2 byte-to-unicode table: the UTF-8 encoding of the symbol for byte b.
const std::string& byte_symbol(unsigned char b);

struct TokenizerSpec {
  std::string kind = "whitespace";  // whitespace | bpe
  std::filesystem::path vocab;
  std::filesystem::path merges;
};

std::shared_ptr<const Tokenizer> make_tokenizer(const TokenizerSpec& spec);

}  // namespace memprobe
