#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "memprobe/chunking.hpp"
#include "memprobe/corpus.hpp"
#include "memprobe/generation.hpp"
#include "memprobe/tokenization.hpp"

namespace memprobe {

using Units = std::vector<std::string>;
using UnitView = std::span<const std::string>;

// All six metrics take (hypothesis, reference) and return a value in [0, 1].
// Empty-input conventions: both empty scores 1, exactly one empty scores 0.

/// |set(h) ∩ set(r)| / |set(h) ∪ set(r)|.
double jaccard(UnitView h, UnitView r);
/// Multiset variant: sum of min counts over sum of max counts.
double jaccard_multiset(UnitView h, UnitView r);
/// Cosine of unit-count vectors.
double cosine(UnitView h, UnitView r);
/// Unit-level edit distance with unit costs.
std::size_t edit_distance(UnitView h, UnitView r);
/// 1 - edit_distance / max(|h|, |r|).
double levenshtein_sim(UnitView h, UnitView r);
/// Total size of the matching blocks found by recursively splitting around
/// the longest common contiguous block (earliest in h, then earliest in r).
std::size_t matching_units(UnitView h, UnitView r);
/// Ratcliff–Obershelp ratio 2M / (|h| + |r|).
double seq_matcher(UnitView h, UnitView r);

inline constexpr double kBleuEpsilon = 1e-9;
/// Sentence BLEU with clipped n-gram precisions for n = 1..min(4, |h|),
/// uniform weights, brevity penalty exp(1 - |r|/|h|) when |h| < |r|, and a
/// precision of eps/total substituted for any zero precision. 0 if h empty.
double bleu(UnitView h, UnitView r);
std::size_t lcs_length(UnitView h, UnitView r);
/// LCS-based F1.
double rouge_l(UnitView h, UnitView r);

enum class Metric : std::size_t { jaccard, cosine, levenshtein, seq_matcher, bleu, rouge_l };
inline constexpr std::size_t kMetricCount = 6;
inline constexpr std::array<std::string_view, kMetricCount> kMetricNames = {
    "jaccard", "cosine", "levenshtein", "seq_matcher", "bleu", "rouge_l"};

Metric parse_metric(std::string_view name);
std::string_view metric_name(Metric m);

using MetricValues = std::array<double, kMetricCount>;

MetricValues score_units(UnitView h, UnitView r);

enum class Granularity { word, model_token, character };
std::string_view to_string(Granularity g);
Granularity parse_granularity(std::string_view s);

/// Splits text into comparison units. `tok` is needed for model_token.
Units to_units(std::string_view text, Granularity g, const Tokenizer* tok = nullptr);

struct ScoreRecord {
  std::string book_id;
  std::size_t chunk_index = 0;
  MetricValues values{};

  double operator[](Metric m) const { return values[static_cast<std::size_t>(m)]; }
};

struct ScoringOptions {
  Granularity granularity = Granularity::word;
  const Tokenizer* tokenizer = nullptr;
  bool multiset_jaccard = false;
  std::size_t threads = 1;
};

class ScoringError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Piecewise records are compared against their chunk's target_text;
/// autoregressive records against the book's trimmed text from token
/// `spec.prefix_len` onward. Output order follows `records`.
std::vector<ScoreRecord> score_all(std::span<const GenerationRecord> records, std::span<const Chunk> chunks,
                                   const Catalog& books, const ChunkSpec& spec, const ScoringOptions& opts);

/// The ground truth an autoregressive run is scored against.
std::string autoregressive_reference(const BookRecord& book, const Tokenizer& tok, const ChunkSpec& spec);

double median(std::vector<double> values);

struct BookSummary {
  std::string book_id;
  std::string title;
  std::uint64_t ratings_count = 0;
  bool post_cutoff = false;
  std::size_t n_scored = 0;
  MetricValues medians{};

  double operator[](Metric m) const { return medians[static_cast<std::size_t>(m)]; }
};

struct SummaryResult {
  std::vector<BookSummary> summaries;  // catalog order
  std::vector<std::string> warnings;
};

SummaryResult summarize(std::span<const ScoreRecord> scores, const Catalog& catalog);

inline constexpr std::string_view kScoresHeader =
    "book_id,chunk_index,jaccard,cosine,levenshtein,seq_matcher,bleu,rouge_l";
inline constexpr std::string_view kSummariesHeader =
    "book_id,title,ratings,post_cutoff,n_chunks,median_jaccard,median_cosine,median_levenshtein,"
    "median_seq_matcher,median_bleu,median_rouge_l";

void write_scores_csv(std::ostream& os, std::span<const ScoreRecord> scores);
std::vector<ScoreRecord> read_scores_csv(std::string_view text);
void write_summaries_csv(std::ostream& os, std::span<const BookSummary> summaries);
std::vector<BookSummary> read_summaries_csv(std::string_view text);

}  // namespace memprobe
