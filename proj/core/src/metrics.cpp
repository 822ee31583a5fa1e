#include "memprobe/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <map>
#include <ostream>
#include <unordered_map>
#include <unordered_set>
#include <utility>

#include <fmt/format.h>

#include "memprobe/csv.hpp"
#include "memprobe/parallel.hpp"

namespace memprobe {
namespace {

// Both sequences re-expressed as small integer ids over their joint vocabulary.
struct Interned {
  std::vector<int> h;
  std::vector<int> r;
  int vocab = 0;
};

Interned intern(UnitView h, UnitView r) {
  Interned out;
  std::unordered_map<std::string_view, int> ids;
  auto id_of = [&](const std::string& u) {
    auto [it, inserted] = ids.try_emplace(u, out.vocab);
    if (inserted) ++out.vocab;
    return it->second;
  };
  out.h.reserve(h.size());
  out.r.reserve(r.size());
  for (const auto& u : h) out.h.push_back(id_of(u));
  for (const auto& u : r) out.r.push_back(id_of(u));
  return out;
}

struct Block {
  std::size_t i = 0, j = 0, size = 0;
};

Block longest_match(const std::vector<int>& a, const std::vector<int>& b,
                    const std::vector<std::vector<std::size_t>>& b2j, std::size_t alo, std::size_t ahi,
                    std::size_t blo, std::size_t bhi) {
  Block best{alo, blo, 0};
  // run[j + 1] = length of the common run ending at (i - 1, j).
  std::vector<std::size_t> run(b.size() + 1, 0), next(b.size() + 1, 0);
  std::vector<std::size_t> touched, next_touched;
  for (std::size_t i = alo; i < ahi; ++i) {
    next_touched.clear();
    for (std::size_t j : b2j[static_cast<std::size_t>(a[i])]) {
      if (j < blo) continue;
      if (j >= bhi) break;
      std::size_t k = run[j] + 1;
      next[j + 1] = k;
      next_touched.push_back(j + 1);
      if (k > best.size) best = {i + 1 - k, j + 1 - k, k};
    }
    for (std::size_t t : touched) run[t] = 0;
    for (std::size_t t : next_touched) {
      run[t] = next[t];
      next[t] = 0;
    }
    std::swap(touched, next_touched);
  }
  return best;
}

}  // namespace

double jaccard(UnitView h, UnitView r) {
  if (h.empty() && r.empty()) return 1.0;
  if (h.empty() || r.empty()) return 0.0;
  std::unordered_set<std::string_view> hs(h.begin(), h.end());
  std::unordered_set<std::string_view> rs(r.begin(), r.end());
  std::size_t inter = 0;
  for (const auto& u : hs) inter += rs.count(u);
  const std::size_t uni = hs.size() + rs.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double jaccard_multiset(UnitView h, UnitView r) {
  if (h.empty() && r.empty()) return 1.0;
  if (h.empty() || r.empty()) return 0.0;
  std::unordered_map<std::string_view, std::pair<std::size_t, std::size_t>> counts;
  for (const auto& u : h) ++counts[u].first;
  for (const auto& u : r) ++counts[u].second;
  std::size_t lo = 0, hi = 0;
  for (const auto& [u, c] : counts) {
    lo += std::min(c.first, c.second);
    hi += std::max(c.first, c.second);
  }
  return static_cast<double>(lo) / static_cast<double>(hi);
}

double cosine(UnitView h, UnitView r) {
  if (h.empty() && r.empty()) return 1.0;
  if (h.empty() || r.empty()) return 0.0;
  std::unordered_map<std::string_view, std::pair<std::uint64_t, std::uint64_t>> counts;
  for (const auto& u : h) ++counts[u].first;
  for (const auto& u : r) ++counts[u].second;
  std::uint64_t dot = 0, nh = 0, nr = 0;
  for (const auto& [u, c] : counts) {
    dot += c.first * c.second;
    nh += c.first * c.first;
    nr += c.second * c.second;
  }
  const double value = static_cast<double>(dot) / std::sqrt(static_cast<double>(nh) * static_cast<double>(nr));
  return std::min(1.0, value);
}

std::size_t edit_distance(UnitView h, UnitView r) {
  Interned s = intern(h, r);
  const std::size_t m = s.r.size();
  std::vector<std::size_t> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = j;
  for (std::size_t i = 1; i <= s.h.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= m; ++j) {
      std::size_t sub = prev[j - 1] + (s.h[i - 1] == s.r[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double levenshtein_sim(UnitView h, UnitView r) {
  if (h.empty() && r.empty()) return 1.0;
  const double longest = static_cast<double>(std::max(h.size(), r.size()));
  return 1.0 - static_cast<double>(edit_distance(h, r)) / longest;
}

std::size_t matching_units(UnitView h, UnitView r) {
  if (h.empty() || r.empty()) return 0;
  Interned s = intern(h, r);
  std::vector<std::vector<std::size_t>> b2j(static_cast<std::size_t>(s.vocab));
  for (std::size_t j = 0; j < s.r.size(); ++j) b2j[static_cast<std::size_t>(s.r[j])].push_back(j);

  struct Range {
    std::size_t alo, ahi, blo, bhi;
  };
  std::vector<Range> pending{{0, s.h.size(), 0, s.r.size()}};
  std::size_t matched = 0;
  while (!pending.empty()) {
    Range q = pending.back();
    pending.pop_back();
    Block blk = longest_match(s.h, s.r, b2j, q.alo, q.ahi, q.blo, q.bhi);
    if (blk.size == 0) continue;
    matched += blk.size;
    if (q.alo < blk.i && q.blo < blk.j) pending.push_back({q.alo, blk.i, q.blo, blk.j});
    if (blk.i + blk.size < q.ahi && blk.j + blk.size < q.bhi)
      pending.push_back({blk.i + blk.size, q.ahi, blk.j + blk.size, q.bhi});
  }
  return matched;
}

double seq_matcher(UnitView h, UnitView r) {
  if (h.empty() && r.empty()) return 1.0;
  return 2.0 * static_cast<double>(matching_units(h, r)) / static_cast<double>(h.size() + r.size());
}

double bleu(UnitView h, UnitView r) {
  if (h.empty()) return 0.0;
  Interned s = intern(h, r);
  const std::size_t max_order = std::min<std::size_t>(4, s.h.size());
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_order; ++n) {
    std::map<std::vector<int>, std::size_t> ref_counts, hyp_counts;
    for (std::size_t k = 0; k + n <= s.r.size(); ++k)
      ++ref_counts[std::vector<int>(s.r.begin() + static_cast<std::ptrdiff_t>(k),
                                    s.r.begin() + static_cast<std::ptrdiff_t>(k + n))];
    for (std::size_t k = 0; k + n <= s.h.size(); ++k)
      ++hyp_counts[std::vector<int>(s.h.begin() + static_cast<std::ptrdiff_t>(k),
                                    s.h.begin() + static_cast<std::ptrdiff_t>(k + n))];
    std::size_t clipped = 0;
    for (const auto& [gram, count] : hyp_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) clipped += std::min(count, it->second);
    }
    const double total = static_cast<double>(s.h.size() - n + 1);
    const double precision = clipped == 0 ? kBleuEpsilon / total : static_cast<double>(clipped) / total;
    log_sum += std::log(precision);
  }
  const double geo = std::exp(log_sum / static_cast<double>(max_order));
  const double hl = static_cast<double>(s.h.size());
  const double rl = static_cast<double>(s.r.size());
  const double bp = hl < rl ? std::exp(1.0 - rl / hl) : 1.0;
  return std::clamp(bp * geo, 0.0, 1.0);
}

std::size_t lcs_length(UnitView h, UnitView r) {
  Interned s = intern(h, r);
  const std::size_t m = s.r.size();
  std::vector<std::size_t> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= s.h.size(); ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      cur[j] = s.h[i - 1] == s.r[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double rouge_l(UnitView h, UnitView r) {
  if (h.empty() && r.empty()) return 1.0;
  if (h.empty() || r.empty()) return 0.0;
  const std::size_t lcs = lcs_length(h, r);
  if (lcs == 0) return 0.0;
  const double p = static_cast<double>(lcs) / static_cast<double>(h.size());
  const double rec = static_cast<double>(lcs) / static_cast<double>(r.size());
  return 2.0 * p * rec / (p + rec);
}

Metric parse_metric(std::string_view name) {
  for (std::size_t k = 0; k < kMetricCount; ++k)
    if (kMetricNames[k] == name) return static_cast<Metric>(k);
  throw std::invalid_argument(fmt::format("unknown metric '{}'", name));
}

std::string_view metric_name(Metric m) { return kMetricNames[static_cast<std::size_t>(m)]; }

MetricValues score_units(UnitView h, UnitView r) {
  return {jaccard(h, r), cosine(h, r), levenshtein_sim(h, r), seq_matcher(h, r), bleu(h, r), rouge_l(h, r)};
}

std::string_view to_string(Granularity g) {
  switch (g) {
    case Granularity::word: return "word";
    case Granularity::model_token: return "model-token";
    case Granularity::character: return "character";
  }
  return "word";
}

Granularity parse_granularity(std::string_view s) {
  if (s == "word") return Granularity::word;
  if (s == "model-token") return Granularity::model_token;
  if (s == "character") return Granularity::character;
  throw std::invalid_argument(fmt::format("unknown granularity '{}' (expected word|model-token|character)", s));
}

Units to_units(std::string_view text, Granularity g, const Tokenizer* tok) {
  Units out;
  switch (g) {
    case Granularity::word: {
      WhitespaceTokenizer splitter;
      for (const auto& span : splitter.encode(text).source_spans) out.emplace_back(text.substr(span.begin, span.size()));
      break;
    }
    case Granularity::character: {
      std::size_t k = 0;
      while (k < text.size()) {
        auto lead = static_cast<unsigned char>(text[k]);
        std::size_t len = lead < 0x80 ? 1 : (lead >> 5) == 0x6 ? 2 : (lead >> 4) == 0xE ? 3 : (lead >> 3) == 0x1E ? 4 : 1;
        len = std::min(len, text.size() - k);
        out.emplace_back(text.substr(k, len));
        k += len;
      }
      break;
    }
    case Granularity::model_token: {
      if (!tok) throw std::invalid_argument("model-token granularity needs a tokenizer");
      auto seq = tok->encode(text);
      out = tok->pieces(seq.ids);
      break;
    }
  }
  return out;
}

std::string autoregressive_reference(const BookRecord& book, const Tokenizer& tok, const ChunkSpec& spec) {
  TokenSeq seq = tok.encode(book.trimmed_text);
  if (seq.size() <= spec.prefix_len) return {};
  return book.trimmed_text.substr(seq.source_spans[spec.prefix_len].begin);
}

std::vector<ScoreRecord> score_all(std::span<const GenerationRecord> records, std::span<const Chunk> chunks,
                                   const Catalog& books, const ChunkSpec& spec, const ScoringOptions& opts) {
  std::map<std::pair<std::string_view, std::size_t>, const Chunk*> by_key;
  for (const auto& c : chunks) by_key[{c.book_id, c.index}] = &c;

  // References resolved up front so every record fails fast if unmatched.
  std::vector<const std::string*> refs(records.size(), nullptr);
  std::map<std::string, std::string, std::less<>> ar_refs;
  for (std::size_t k = 0; k < records.size(); ++k) {
    const auto& rec = records[k];
    if (rec.mode == GenerationMode::piecewise) {
      auto it = by_key.find({rec.book_id, rec.chunk_index});
      if (it == by_key.end())
        throw ScoringError(fmt::format("no chunk for record {}#{}", rec.book_id, rec.chunk_index));
      refs[k] = &it->second->target_text;
    } else {
      auto it = ar_refs.find(rec.book_id);
      if (it == ar_refs.end()) {
        const BookRecord* book = books.find(rec.book_id);
        if (!book) throw ScoringError(fmt::format("no book for autoregressive record {}", rec.book_id));
        WhitespaceTokenizer fallback;
        const Tokenizer& tok = opts.tokenizer ? *opts.tokenizer : fallback;
        it = ar_refs.emplace(rec.book_id, autoregressive_reference(*book, tok, spec)).first;
      }
      refs[k] = &it->second;
    }
  }

  std::vector<ScoreRecord> out(records.size());
  parallel_for(records.size(), opts.threads, [&](std::size_t k) {
    Units h = to_units(records[k].generated_text, opts.granularity, opts.tokenizer);
    Units r = to_units(*refs[k], opts.granularity, opts.tokenizer);
    ScoreRecord s;
    s.book_id = records[k].book_id;
    s.chunk_index = records[k].chunk_index;
    s.values = score_units(h, r);
    if (opts.multiset_jaccard) s.values[static_cast<std::size_t>(Metric::jaccard)] = jaccard_multiset(h, r);
    out[k] = std::move(s);
  });
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return (values[n / 2 - 1] + values[n / 2]) / 2.0;
}

SummaryResult summarize(std::span<const ScoreRecord> scores, const Catalog& catalog) {
  std::map<std::string, std::vector<const ScoreRecord*>, std::less<>> grouped;
  for (const auto& s : scores) grouped[s.book_id].push_back(&s);

  SummaryResult result;
  for (const auto& [id, _] : grouped)
    if (!catalog.find(id)) result.warnings.push_back(fmt::format("scores for unknown book '{}' ignored", id));

  for (const auto& book : catalog.books) {
    auto it = grouped.find(book.book_id);
    if (it == grouped.end() || it->second.empty()) {
      result.warnings.push_back(fmt::format("book '{}' has no scores; excluded", book.book_id));
      continue;
    }
    BookSummary sum;
    sum.book_id = book.book_id;
    sum.title = book.title;
    sum.ratings_count = book.ratings_count;
    sum.post_cutoff = book.post_cutoff;
    sum.n_scored = it->second.size();
    for (std::size_t m = 0; m < kMetricCount; ++m) {
      std::vector<double> v;
      v.reserve(it->second.size());
      for (const ScoreRecord* s : it->second) v.push_back(s->values[m]);
      sum.medians[m] = median(std::move(v));
    }
    result.summaries.push_back(std::move(sum));
  }
  return result;
}

namespace {

std::string fixed6(double v) { return fmt::format("{:.6f}", v); }

double parse_double(const std::string& s, std::size_t line) {
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size())
    throw std::runtime_error(fmt::format("line {}: '{}' is not a number", line, s));
  return v;
}

std::uint64_t parse_uint(const std::string& s, std::size_t line) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size())
    throw std::runtime_error(fmt::format("line {}: '{}' is not a non-negative integer", line, s));
  return v;
}

std::vector<csv::Row> parse_with_header(std::string_view text, std::string_view header, std::size_t width) {
  auto rows = csv::parse(text);
  if (rows.empty() || csv::format_row(rows.front().fields) != header)
    throw std::runtime_error(fmt::format("expected header '{}'", header));
  for (std::size_t k = 1; k < rows.size(); ++k)
    if (rows[k].fields.size() != width)
      throw std::runtime_error(
          fmt::format("line {}: expected {} fields, got {}", rows[k].line, width, rows[k].fields.size()));
  rows.erase(rows.begin());
  return rows;
}

}  // namespace

void write_scores_csv(std::ostream& os, std::span<const ScoreRecord> scores) {
  os << kScoresHeader << '\n';
  for (const auto& s : scores) {
    std::vector<std::string> row{s.book_id, std::to_string(s.chunk_index)};
    for (double v : s.values) row.push_back(fixed6(v));
    csv::write_row(os, row);
  }
}

std::vector<ScoreRecord> read_scores_csv(std::string_view text) {
  std::vector<ScoreRecord> out;
  for (const auto& row : parse_with_header(text, kScoresHeader, 2 + kMetricCount)) {
    ScoreRecord s;
    s.book_id = row.fields[0];
    s.chunk_index = parse_uint(row.fields[1], row.line);
    for (std::size_t m = 0; m < kMetricCount; ++m) s.values[m] = parse_double(row.fields[2 + m], row.line);
    out.push_back(std::move(s));
  }
  return out;
}

void write_summaries_csv(std::ostream& os, std::span<const BookSummary> summaries) {
  os << kSummariesHeader << '\n';
  for (const auto& s : summaries) {
    std::vector<std::string> row{s.book_id, s.title, std::to_string(s.ratings_count), s.post_cutoff ? "1" : "0",
                                 std::to_string(s.n_scored)};
    for (double v : s.medians) row.push_back(fixed6(v));
    csv::write_row(os, row);
  }
}

std::vector<BookSummary> read_summaries_csv(std::string_view text) {
  std::vector<BookSummary> out;
  for (const auto& row : parse_with_header(text, kSummariesHeader, 5 + kMetricCount)) {
    BookSummary s;
    s.book_id = row.fields[0];
    s.title = row.fields[1];
    s.ratings_count = parse_uint(row.fields[2], row.line);
    const std::string& flag = row.fields[3];
    if (flag != "0" && flag != "1")
      throw std::runtime_error(fmt::format("line {}: post_cutoff must be 0 or 1", row.line));
    s.post_cutoff = flag == "1";
    s.n_scored = parse_uint(row.fields[4], row.line);
    for (std::size_t m = 0; m < kMetricCount; ++m) s.medians[m] = parse_double(row.fields[5 + m], row.line);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace memprobe
