#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "memprobe/tokenization.hpp"

namespace memprobe {

using Date = std::chrono::year_month_day;

/// Parses YYYY-MM-DD; nullopt on anything else, including impossible dates.
std::optional<Date> parse_iso_date(std::string_view s);
std::string format_iso_date(const Date& d);

inline constexpr Date kDefaultCutoff{std::chrono::year{2023}, std::chrono::December, std::chrono::day{31}};

struct BookRecord {
  std::string book_id;
  std::string title;
  std::string author;
  std::uint64_t ratings_count = 0;
  Date gutenberg_added{};
  bool post_cutoff = false;
  std::string raw_text;
  std::string trimmed_text;

  // Filled by trim_boilerplate.
  bool trimmed = false;
  bool usable = false;
  std::size_t token_count = 0;
  std::size_t trimmed_token_count = 0;
  std::size_t trimmed_offset = 0;  // byte offset of trimmed_text in raw_text
};

class CatalogError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Catalog {
  std::vector<BookRecord> books;
  Date cutoff_date = kDefaultCutoff;

  const BookRecord* find(std::string_view book_id) const;
  std::vector<std::string> ids() const;
};

inline constexpr std::string_view kCatalogHeader = "book_id,title,author,ratings,added_date";

/// Metadata only; raw_text stays empty. Errors carry the offending line.
Catalog parse_catalog(std::string_view csv_text, Date cutoff = kDefaultCutoff);

/// Reads `<text_dir>/<book_id>.txt` for every row, normalizing line endings.
Catalog load_catalog(const std::filesystem::path& catalog_path, const std::filesystem::path& text_dir,
                     Date cutoff = kDefaultCutoff);

/// Metadata rows in catalog order, header first.
std::string serialize_catalog(const Catalog& catalog);

std::string normalize_newlines(std::string_view text);

struct TrimMargins {
  std::size_t head_tokens = 2000;
  std::size_t tail_tokens = 5000;
};

/// Keeps the source text covered by tokens [head, T - tail). Books with
/// T <= head + tail come back with empty trimmed_text and usable == false.
BookRecord trim_boilerplate(BookRecord book, const Tokenizer& tok, TrimMargins margins = {});

/// Trims every book in place.
void trim_catalog(Catalog& catalog, const Tokenizer& tok, TrimMargins margins = {});

// books.jsonl: one trimmed book per line (raw_text is not persisted).
void write_books_jsonl(std::ostream& os, const Catalog& catalog);
Catalog read_books_jsonl(std::istream& is, Date cutoff = kDefaultCutoff);

std::string read_file(const std::filesystem::path& path);

}  // namespace memprobe
