#include "memprobe/corpus.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "memprobe/csv.hpp"

namespace memprobe {

std::optional<Date> parse_iso_date(std::string_view s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
  int y = 0;
  unsigned m = 0, d = 0;
  auto num = [](std::string_view part, auto& out) {
    auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), out);
    return ec == std::errc() && p == part.data() + part.size();
  };
  if (!num(s.substr(0, 4), y) || !num(s.substr(5, 2), m) || !num(s.substr(8, 2), d)) return std::nullopt;
  Date date{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!date.ok()) return std::nullopt;
  return date;
}

std::string format_iso_date(const Date& d) {
  return fmt::format("{:04d}-{:02d}-{:02d}", static_cast<int>(d.year()), static_cast<unsigned>(d.month()),
                     static_cast<unsigned>(d.day()));
}

const BookRecord* Catalog::find(std::string_view book_id) const {
  for (const auto& b : books)
    if (b.book_id == book_id) return &b;
  return nullptr;
}

std::vector<std::string> Catalog::ids() const {
  std::vector<std::string> out;
  out.reserve(books.size());
  for (const auto& b : books) out.push_back(b.book_id);
  return out;
}

std::string normalize_newlines(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '\r') {
      out += '\n';
      if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
    } else {
      out += text[i];
    }
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Catalog parse_catalog(std::string_view csv_text, Date cutoff) {
  Catalog catalog;
  catalog.cutoff_date = cutoff;
  std::vector<csv::Row> rows;
  try {
    rows = csv::parse(csv_text);
  } catch (const csv::ParseError& e) {
    throw CatalogError(fmt::format("malformed catalog at {}", e.what()));
  }
  if (rows.empty()) return catalog;

  if (csv::format_row(rows.front().fields) != kCatalogHeader)
    throw CatalogError(fmt::format("malformed catalog at line {}: expected header '{}'", rows.front().line,
                                   kCatalogHeader));

  std::unordered_set<std::string> seen;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.fields.size() != 5)
      throw CatalogError(fmt::format("malformed catalog at line {}: expected 5 fields, got {}", row.line,
                                     row.fields.size()));
    BookRecord b;
    b.book_id = row.fields[0];
    b.title = row.fields[1];
    b.author = row.fields[2];
    if (b.book_id.empty()) throw CatalogError(fmt::format("malformed catalog at line {}: empty book_id", row.line));
    const std::string& ratings = row.fields[3];
    auto [p, ec] = std::from_chars(ratings.data(), ratings.data() + ratings.size(), b.ratings_count);
    if (ratings.empty() || ec != std::errc() || p != ratings.data() + ratings.size())
      throw CatalogError(
          fmt::format("malformed catalog at line {}: ratings '{}' is not a non-negative integer", row.line, ratings));
    auto date = parse_iso_date(row.fields[4]);
    if (!date)
      throw CatalogError(
          fmt::format("malformed catalog at line {}: added_date '{}' is not YYYY-MM-DD", row.line, row.fields[4]));
    b.gutenberg_added = *date;
    b.post_cutoff = b.gutenberg_added > cutoff;
    if (!seen.insert(b.book_id).second)
      throw CatalogError(fmt::format("duplicate book_id '{}' at line {}", b.book_id, row.line));
    catalog.books.push_back(std::move(b));
  }
  return catalog;
}

Catalog load_catalog(const std::filesystem::path& catalog_path, const std::filesystem::path& text_dir,
                     Date cutoff) {
  if (!std::filesystem::exists(catalog_path)) throw CatalogError("missing catalog: " + catalog_path.string());
  Catalog catalog = parse_catalog(read_file(catalog_path), cutoff);
  for (auto& b : catalog.books) {
    auto path = text_dir / (b.book_id + ".txt");
    if (!std::filesystem::is_regular_file(path)) throw CatalogError("missing text: " + b.book_id);
    b.raw_text = normalize_newlines(read_file(path));
  }
  return catalog;
}

std::string serialize_catalog(const Catalog& catalog) {
  std::string out(kCatalogHeader);
  out += '\n';
  for (const auto& b : catalog.books) {
    out += csv::format_row({b.book_id, b.title, b.author, std::to_string(b.ratings_count),
                            format_iso_date(b.gutenberg_added)});
    out += '\n';
  }
  return out;
}

BookRecord trim_boilerplate(BookRecord book, const Tokenizer& tok, TrimMargins margins) {
  TokenSeq seq = tok.encode(book.raw_text);
  const std::size_t total = seq.size();
  book.trimmed = true;
  book.token_count = total;
  if (total <= margins.head_tokens + margins.tail_tokens) {
    book.trimmed_text.clear();
    book.usable = false;
    book.trimmed_token_count = 0;
    book.trimmed_offset = 0;
    return book;
  }
  const std::size_t first = margins.head_tokens;
  const std::size_t last = total - margins.tail_tokens - 1;
  const std::size_t begin = seq.source_spans[first].begin;
  const std::size_t end = seq.source_spans[last].end;
  book.trimmed_text = book.raw_text.substr(begin, end - begin);
  book.trimmed_offset = begin;
  book.trimmed_token_count = total - margins.head_tokens - margins.tail_tokens;
  book.usable = true;
  return book;
}

void trim_catalog(Catalog& catalog, const Tokenizer& tok, TrimMargins margins) {
  for (auto& b : catalog.books) b = trim_boilerplate(std::move(b), tok, margins);
}

void write_books_jsonl(std::ostream& os, const Catalog& catalog) {
  for (const auto& b : catalog.books) {
    nlohmann::ordered_json j;
    j["book_id"] = b.book_id;
    j["title"] = b.title;
    j["author"] = b.author;
    j["ratings"] = b.ratings_count;
    j["added_date"] = format_iso_date(b.gutenberg_added);
    j["post_cutoff"] = b.post_cutoff;
    j["usable"] = b.usable;
    j["token_count"] = b.token_count;
    j["trimmed_token_count"] = b.trimmed_token_count;
    j["trimmed_offset"] = b.trimmed_offset;
    j["trimmed_text"] = b.trimmed_text;
    os << j.dump() << '\n';
  }
}

Catalog read_books_jsonl(std::istream& is, Date cutoff) {
  Catalog catalog;
  catalog.cutoff_date = cutoff;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      BookRecord b;
      b.book_id = j.at("book_id").get<std::string>();
      b.title = j.at("title").get<std::string>();
      b.author = j.at("author").get<std::string>();
      b.ratings_count = j.at("ratings").get<std::uint64_t>();
      auto date = parse_iso_date(j.at("added_date").get<std::string>());
      if (!date) throw CatalogError("bad added_date");
      b.gutenberg_added = *date;
      b.post_cutoff = j.at("post_cutoff").get<bool>();
      b.trimmed = true;
      b.usable = j.at("usable").get<bool>();
      b.token_count = j.at("token_count").get<std::size_t>();
      b.trimmed_token_count = j.at("trimmed_token_count").get<std::size_t>();
      b.trimmed_offset = j.at("trimmed_offset").get<std::size_t>();
      b.trimmed_text = j.at("trimmed_text").get<std::string>();
      catalog.books.push_back(std::move(b));
    } catch (const std::exception& e) {
      throw CatalogError(fmt::format("books.jsonl line {}: {}", lineno, e.what()));
    }
  }
  return catalog;
}

}  // namespace memprobe
