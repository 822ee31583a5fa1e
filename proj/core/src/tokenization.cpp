#include "memprobe/tokenization.hpp"

#include <array>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace memprobe {
namespace {

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

enum class CharClass { space, letter, digit, other };

CharClass classify(unsigned char c) {
  if (is_space(c)) return CharClass::space;
  if (c >= '0' && c <= '9') return CharClass::digit;
  if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80) return CharClass::letter;
  return CharClass::other;
}

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

std::string encode_utf8(std::uint32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
  return out;
}

struct ByteTables {
  std::array<std::string, 256> to_symbol;
  std::unordered_map<std::string, unsigned char> to_byte;
};

const ByteTables& byte_tables() {
  static const ByteTables tables = [] {
    ByteTables t;
    std::array<bool, 256> direct{};
    for (int b = 33; b <= 126; ++b) direct[b] = true;
    for (int b = 161; b <= 172; ++b) direct[b] = true;
    for (int b = 174; b <= 255; ++b) direct[b] = true;
    std::uint32_t next = 256;
    for (int b = 0; b < 256; ++b) {
      std::uint32_t cp = direct[b] ? static_cast<std::uint32_t>(b) : next++;
      t.to_symbol[b] = encode_utf8(cp);
      t.to_byte.emplace(t.to_symbol[b], static_cast<unsigned char>(b));
    }
    return t;
  }();
  return tables;
}

std::string byte_fallback_name(unsigned char b) { return fmt::format("<0x{:02X}>", b); }

std::optional<unsigned char> parse_byte_fallback(std::string_view tok) {
  if (tok.size() != 6 || tok.substr(0, 3) != "<0x" || tok.back() != '>') return std::nullopt;
  unsigned value = 0;
  for (char c : tok.substr(3, 2)) {
    value <<= 4;
    if (c >= '0' && c <= '9') value |= static_cast<unsigned>(c - '0');
    else if (c >= 'A' && c <= 'F') value |= static_cast<unsigned>(c - 'A' + 10);
    else if (c >= 'a' && c <= 'f') value |= static_cast<unsigned>(c - 'a' + 10);
    else return std::nullopt;
  }
  return static_cast<unsigned char>(value);
}

}  // namespace

std::vector<std::string> Tokenizer::pieces(std::span<const TokenId> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (TokenId id : ids) out.push_back(decode(std::span<const TokenId>(&id, 1)));
  return out;
}

// ---------------------------------------------------------------------------
// Whitespace

TokenId WhitespaceTokenizer::intern(std::string_view word) const {
  {
    std::shared_lock lock(mutex_);
    if (auto it = ids_.find(std::string(word)); it != ids_.end()) return it->second;
  }
  std::unique_lock lock(mutex_);
  auto [it, inserted] = ids_.try_emplace(std::string(word), static_cast<TokenId>(words_.size()));
  if (inserted) words_.emplace_back(word);
  return it->second;
}

TokenSeq WhitespaceTokenizer::encode(std::string_view text) const {
  TokenSeq seq;
  seq.tokenizer_name = name();
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(static_cast<unsigned char>(text[i]))) ++i;
    if (i == text.size()) break;
    std::size_t start = i;
    while (i < text.size() && !is_space(static_cast<unsigned char>(text[i]))) ++i;
    seq.ids.push_back(intern(text.substr(start, i - start)));
    seq.source_spans.push_back({start, i});
  }
  return seq;
}

std::string WhitespaceTokenizer::decode(std::span<const TokenId> ids) const {
  std::shared_lock lock(mutex_);
  std::string out;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] >= words_.size())
      throw TokenizerError(fmt::format("invalid token id {} at index {}", ids[k], k));
    if (k) out += ' ';
    out += words_[ids[k]];
  }
  return out;
}

std::vector<std::string> WhitespaceTokenizer::pieces(std::span<const TokenId> ids) const {
  std::shared_lock lock(mutex_);
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] >= words_.size())
      throw TokenizerError(fmt::format("invalid token id {} at index {}", ids[k], k));
    out.push_back(words_[ids[k]]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// BPE

const std::string& byte_symbol(unsigned char b) { return byte_tables().to_symbol[b]; }

std::vector<ByteSpan> pretokenize(std::string_view text) {
  std::vector<ByteSpan> out;
  const std::size_t n = text.size();
  std::size_t i = 0;
  auto cls = [&](std::size_t k) { return classify(static_cast<unsigned char>(text[k])); };
  while (i < n) {
    std::size_t start = i;
    if (cls(i) == CharClass::space) {
      if (text[i] == ' ' && i + 1 < n && cls(i + 1) != CharClass::space) {
        // " word": the single space is glued to the following run.
        CharClass c = cls(i + 1);
        i += 1;
        while (i < n && cls(i) == c) ++i;
      } else {
        while (i < n && cls(i) == CharClass::space) ++i;
        // Leave a trailing ' ' for the next word, like `\s+(?!\S)`.
        if (i < n && text[i - 1] == ' ' && i - 1 > start) --i;
      }
    } else {
      CharClass c = cls(i);
      while (i < n && cls(i) == c) ++i;
    }
    out.push_back({start, i});
  }
  return out;
}

BpeTokenizer::BpeTokenizer(std::string name, std::unordered_map<std::string, TokenId> vocab,
                           std::vector<std::pair<std::string, std::string>> merges)
    : name_(std::move(name)), vocab_(std::move(vocab)) {
  TokenId max_id = 0;
  for (const auto& [tok, id] : vocab_) max_id = std::max(max_id, id);
  id_to_token_.assign(vocab_.empty() ? 0 : static_cast<std::size_t>(max_id) + 1, std::string());
  std::vector<bool> seen(id_to_token_.size(), false);
  for (const auto& [tok, id] : vocab_) {
    if (seen[id]) throw TokenizerError(fmt::format("duplicate token id {} in vocabulary", id));
    seen[id] = true;
    id_to_token_[id] = tok;
  }
  for (std::size_t rank = 0; rank < merges.size(); ++rank) {
    merge_rank_.try_emplace(merges[rank], rank);
  }
  byte_level_ = vocab_.count(byte_symbol(' ')) > 0;
}

BpeTokenizer BpeTokenizer::from_files(const std::filesystem::path& vocab_json,
                                      const std::filesystem::path& merges_txt) {
  std::ifstream vin(vocab_json);
  if (!vin) throw TokenizerError("cannot open vocabulary " + vocab_json.string());
  nlohmann::json j;
  try {
    vin >> j;
  } catch (const nlohmann::json::exception& e) {
    throw TokenizerError("malformed vocabulary " + vocab_json.string() + ": " + e.what());
  }
  if (!j.is_object()) throw TokenizerError("vocabulary must be a JSON object: " + vocab_json.string());
  std::unordered_map<std::string, TokenId> vocab;
  for (const auto& [tok, id] : j.items()) {
    if (!id.is_number_unsigned())
      throw TokenizerError(fmt::format("vocabulary entry '{}' has a non-integer id", tok));
    vocab.emplace(tok, id.get<TokenId>());
  }

  std::ifstream min(merges_txt);
  if (!min) throw TokenizerError("cannot open merges " + merges_txt.string());
  std::vector<std::pair<std::string, std::string>> merges;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(min, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.starts_with("#version")) continue;
    auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 == line.size())
      throw TokenizerError(fmt::format("{}:{}: expected '<left> <right>'", merges_txt.string(), lineno));
    merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return BpeTokenizer(vocab_json.stem().string(), std::move(vocab), std::move(merges));
}

std::vector<BpeTokenizer::Symbol> BpeTokenizer::initial_symbols(std::string_view piece,
                                                                std::size_t base) const {
  std::vector<Symbol> out;
  if (byte_level_) {
    for (std::size_t k = 0; k < piece.size(); ++k) {
      out.push_back({byte_symbol(static_cast<unsigned char>(piece[k])), {base + k, base + k + 1}});
    }
    return out;
  }
  std::size_t k = 0;
  while (k < piece.size()) {
    std::size_t len = std::min(utf8_length(static_cast<unsigned char>(piece[k])), piece.size() - k);
    std::string ch(piece.substr(k, len));
    if (vocab_.count(ch)) {
      out.push_back({std::move(ch), {base + k, base + k + len}});
    } else {
      for (std::size_t b = 0; b < len; ++b) {
        auto byte = static_cast<unsigned char>(piece[k + b]);
        std::string fallback = byte_fallback_name(byte);
        if (!vocab_.count(fallback))
          throw TokenizerError(fmt::format("unknown byte 0x{:02X} at offset {} with no fallback token",
                                           static_cast<unsigned>(byte), base + k + b));
        out.push_back({std::move(fallback), {base + k + b, base + k + b + 1}});
      }
    }
    k += len;
  }
  return out;
}

void BpeTokenizer::encode_piece(std::string_view text, std::size_t base, TokenSeq& out) const {
  std::vector<Symbol> syms = initial_symbols(text, base);
  while (syms.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    std::size_t best_at = 0;
    for (std::size_t k = 0; k + 1 < syms.size(); ++k) {
      auto it = merge_rank_.find({syms[k].text, syms[k + 1].text});
      if (it != merge_rank_.end() && it->second < best_rank) {
        best_rank = it->second;
        best_at = k;
      }
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    syms[best_at].text += syms[best_at + 1].text;
    syms[best_at].span.end = syms[best_at + 1].span.end;
    syms.erase(syms.begin() + static_cast<std::ptrdiff_t>(best_at) + 1);
  }
  for (auto& s : syms) {
    auto it = vocab_.find(s.text);
    if (it == vocab_.end())
      throw TokenizerError(fmt::format("merged symbol at offset {} is not in the vocabulary", s.span.begin));
    out.ids.push_back(it->second);
    out.source_spans.push_back(s.span);
  }
}

TokenSeq BpeTokenizer::encode(std::string_view text) const {
  TokenSeq seq;
  seq.tokenizer_name = name_;
  for (const ByteSpan& p : pretokenize(text)) {
    encode_piece(text.substr(p.begin, p.size()), p.begin, seq);
  }
  return seq;
}

std::string BpeTokenizer::surface_bytes(TokenId id) const {
  const std::string& tok = id_to_token_[id];
  if (byte_level_) {
    const auto& table = byte_tables().to_byte;
    std::string out;
    std::size_t k = 0;
    while (k < tok.size()) {
      std::size_t len = std::min(utf8_length(static_cast<unsigned char>(tok[k])), tok.size() - k);
      auto it = table.find(tok.substr(k, len));
      if (it != table.end()) out += static_cast<char>(it->second);
      else out.append(tok, k, len);
      k += len;
    }
    return out;
  }
  if (auto b = parse_byte_fallback(tok)) return std::string(1, static_cast<char>(*b));
  return tok;
}

std::string BpeTokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] >= id_to_token_.size() || (id_to_token_[ids[k]].empty()))
      throw TokenizerError(fmt::format("invalid token id {} at index {}", ids[k], k));
    out += surface_bytes(ids[k]);
  }
  return out;
}

std::vector<std::string> BpeTokenizer::pieces(std::span<const TokenId> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] >= id_to_token_.size() || id_to_token_[ids[k]].empty())
      throw TokenizerError(fmt::format("invalid token id {} at index {}", ids[k], k));
    out.push_back(surface_bytes(ids[k]));
  }
  return out;
}

std::shared_ptr<const Tokenizer> make_tokenizer(const TokenizerSpec& spec) {
  if (spec.kind == "whitespace") return std::make_shared<WhitespaceTokenizer>();
  if (spec.kind == "bpe") {
    return std::make_shared<BpeTokenizer>(BpeTokenizer::from_files(spec.vocab, spec.merges));
  }
  throw TokenizerError("unknown tokenizer kind '" + spec.kind + "'");
}

}  // namespace memprobe
