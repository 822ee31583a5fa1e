#pragma once

#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "memprobe/chunking.hpp"
#include "memprobe/lora_audit.hpp"
#include "memprobe/metrics.hpp"

namespace memprobe {

enum class CorrelationMethod { pearson_raw, pearson_log1p_ratings, spearman };
inline constexpr std::array<CorrelationMethod, 3> kCorrelationMethods = {
    CorrelationMethod::pearson_raw, CorrelationMethod::pearson_log1p_ratings, CorrelationMethod::spearman};

std::string_view to_string(CorrelationMethod m);
CorrelationMethod parse_correlation_method(std::string_view s);

class DegenerateSeries : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CorrelationResult {
  CorrelationMethod method = CorrelationMethod::spearman;
  Metric metric = Metric::jaccard;
  double coefficient = 0.0;
  std::size_t n = 0;
};

/// Sample Pearson coefficient. Throws DegenerateSeries on zero variance and
/// std::invalid_argument on fewer than two points or unequal lengths.
double pearson(std::span<const double> x, std::span<const double> y);
/// 1-based ranks; tied values share the mean of the ranks they span.
std::vector<double> average_ranks(std::span<const double> v);
double spearman(std::span<const double> x, std::span<const double> y);

/// Ratings against the per-book median of `metric`. The log variant uses
/// log10(1 + ratings).
CorrelationResult correlate(std::span<const BookSummary> summaries, Metric metric, CorrelationMethod method);

/// Popularity (log axis, zero ratings pinned to the floor) against the
/// median metric; pre-cutoff books blue, post-cutoff red.
std::string render_scatter_svg(std::span<const BookSummary> summaries, Metric metric);
/// Three stacked panels (all, attention, MLP), one curve per threshold.
std::string render_depth_profile_svg(const DepthProfile& profile);
/// Log-log histogram of the 120 bins (empty bins omitted).
std::string render_histogram_svg(const LogHistogram& hist);

struct ReportInput {
  std::string config_fingerprint;
  std::string endpoint_fingerprint;
  std::string model_name;
  std::string prompt_mode;
  std::string granularity;
  std::string system_prompt;
  bool system_prompt_is_default = true;
  std::optional<ChunkStats> chunk_stats;
  std::vector<BookSummary> summaries;
  std::vector<CorrelationResult> correlations;
  std::vector<std::string> correlation_errors;
  std::map<std::string, std::string> artifacts;  // role -> relative path
  std::vector<std::string> warnings;
};

/// Known gaps in the method and how this run resolved each one.
std::vector<std::pair<std::string, std::string>> open_question_flags(const ReportInput& in);

/// Schema-versioned JSON ("schema": 1), two-space indent.
std::string report_json(const ReportInput& in);
std::string report_text(const ReportInput& in);

}  // namespace memprobe
