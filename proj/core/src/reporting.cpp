#include "memprobe/reporting.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace memprobe {
namespace {

constexpr std::string_view kBlue = "#1f77b4";
constexpr std::string_view kRed = "#d62728";
constexpr std::string_view kGray = "#7f7f7f";

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// "--" may not appear inside an XML comment.
std::string comment_safe(std::string s) {
  for (auto at = s.find("--"); at != std::string::npos; at = s.find("--", at)) s.replace(at, 2, "- -");
  return s;
}

/// Linear map from [d0, d1] onto [p0, p1].
struct Axis {
  double d0, d1, p0, p1;
  double operator()(double v) const { return p0 + (v - d0) / (d1 - d0) * (p1 - p0); }
};

std::string svg_open(int w, int h) {
  return fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\" "
      "font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"{0}\" height=\"{1}\" fill=\"white\"/>\n",
      w, h);
}

std::string frame(double x0, double y0, double x1, double y1) {
  return fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"none\" "
                     "stroke=\"black\"/>\n",
                     x0, y0, x1 - x0, y1 - y0);
}

std::string text(double x, double y, std::string_view s, std::string_view anchor = "middle") {
  return fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"{}\">{}</text>\n", x, y, anchor, xml_escape(s));
}

std::string tick_x(const Axis& a, double v, double y, std::string_view label) {
  const double x = a(v);
  return fmt::format("<line x1=\"{0:.2f}\" y1=\"{1:.2f}\" x2=\"{0:.2f}\" y2=\"{2:.2f}\" stroke=\"black\"/>\n", x, y,
                     y + 4) +
         text(x, y + 16, label);
}

std::string tick_y(const Axis& a, double v, double x, std::string_view label) {
  const double y = a(v);
  return fmt::format("<line x1=\"{0:.2f}\" y1=\"{1:.2f}\" x2=\"{2:.2f}\" y2=\"{1:.2f}\" stroke=\"black\"/>\n", x - 4,
                     y, x) +
         text(x - 6, y + 4, label, "end");
}

std::string polyline(const std::vector<std::pair<double, double>>& pts, std::string_view color) {
  std::string out;
  if (pts.size() > 1) {
    out += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t k = 0; k < pts.size(); ++k) out += fmt::format("{}{:.2f},{:.2f}", k ? " " : "", pts[k].first, pts[k].second);
    out += "\"/>\n";
  }
  for (const auto& [x, y] : pts)
    out += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"2\" fill=\"{}\"/>\n", x, y, color);
  return out;
}

std::string threshold_label(double t) { return fmt::format("W_rel > {}", t); }

std::string_view threshold_color(std::size_t i) {
  static constexpr std::array<std::string_view, kUpdateThresholds.size()> colors = {kGray, kRed, kBlue};
  return colors[i];
}

}  // namespace

std::string_view to_string(CorrelationMethod m) {
  switch (m) {
    case CorrelationMethod::pearson_raw: return "pearson_raw";
    case CorrelationMethod::pearson_log1p_ratings: return "pearson_log1p_ratings";
    case CorrelationMethod::spearman: return "spearman";
  }
  return "?";
}

CorrelationMethod parse_correlation_method(std::string_view s) {
  for (auto m : kCorrelationMethods)
    if (to_string(m) == s) return m;
  throw std::invalid_argument(
      fmt::format("unknown correlation method '{}' (expected pearson_raw|pearson_log1p_ratings|spearman)", s));
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("correlation series differ in length");
  if (x.size() < 2) throw std::invalid_argument("correlation needs at least two points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double dx = x[k] - mx, dy = y[k] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw DegenerateSeries("degenerate series: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  auto rx = average_ranks(x);
  auto ry = average_ranks(y);
  return pearson(rx, ry);
}

CorrelationResult correlate(std::span<const BookSummary> summaries, Metric metric, CorrelationMethod method) {
  std::vector<double> x, y;
  for (const auto& s : summaries) {
    const double r = static_cast<double>(s.ratings_count);
    x.push_back(method == CorrelationMethod::pearson_log1p_ratings ? std::log10(1.0 + r) : r);
    y.push_back(s[metric]);
  }
  CorrelationResult out;
  out.method = method;
  out.metric = metric;
  out.n = x.size();
  out.coefficient = method == CorrelationMethod::spearman ? spearman(x, y) : pearson(x, y);
  return out;
}

std::string render_scatter_svg(std::span<const BookSummary> summaries, Metric metric) {
  constexpr int W = 640, H = 440;
  constexpr double L = 70, R = 620, T = 30, B = 380;
  double lo = 0, hi = 1;
  bool any = false;
  for (const auto& s : summaries) {
    if (s.ratings_count == 0) continue;
    const double v = std::log10(static_cast<double>(s.ratings_count));
    lo = any ? std::min(lo, v) : v;
    hi = any ? std::max(hi, v) : v;
    any = true;
  }
  lo = std::floor(lo);
  hi = std::max(std::ceil(hi), lo + 1);
  const Axis ax{lo, hi, L, R};
  const Axis ay{0.0, 1.0, B, T};

  std::string out = svg_open(W, H);
  out += "<!-- memprobe-data\nbook_id,ratings,post_cutoff,median_" + std::string(metric_name(metric)) + "\n";
  for (const auto& s : summaries)
    out += comment_safe(fmt::format("{},{},{},{:.6f}\n", s.book_id, s.ratings_count, s.post_cutoff ? 1 : 0, s[metric]));
  out += "-->\n";
  out += frame(L, T, R, B);
  for (int k = static_cast<int>(lo); k <= static_cast<int>(hi); ++k) out += tick_x(ax, k, B, fmt::format("1e{}", k));
  for (int k = 0; k <= 5; ++k) out += tick_y(ay, k / 5.0, L, fmt::format("{:.1f}", k / 5.0));
  out += text((L + R) / 2, H - 20, "ratings (log scale; zero at axis floor)");
  out += fmt::format("<text x=\"18\" y=\"{:.2f}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.2f})\">median "
                     "{}</text>\n",
                     (T + B) / 2, (T + B) / 2, metric_name(metric));
  for (const auto& s : summaries) {
    const double xv = s.ratings_count == 0 ? lo : std::log10(static_cast<double>(s.ratings_count));
    out += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"4\" fill=\"{}\"><title>{}</title></circle>\n", ax(xv),
                       ay(std::clamp(s[metric], 0.0, 1.0)), s.post_cutoff ? kRed : kBlue, xml_escape(s.title.empty() ? s.book_id : s.title));
  }
  out += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"4\" fill=\"{}\"/>\n", R - 90, T + 12, kBlue);
  out += text(R - 80, T + 16, "pre", "start");
  out += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"4\" fill=\"{}\"/>\n", R - 45, T + 12, kRed);
  out += text(R - 35, T + 16, "post", "start");
  out += "</svg>\n";
  return out;
}

std::string render_depth_profile_svg(const DepthProfile& profile) {
  constexpr int W = 640, panel_h = 200, H = 3 * panel_h + 50;
  constexpr double L = 70, R = 620;
  double ymax = 0;
  for (const auto& s : profile.by_threshold)
    for (const auto* series : {&s.all, &s.attention, &s.mlp})
      for (double v : *series) ymax = std::max(ymax, v);
  ymax = ymax == 0 ? 1.0 : std::min(1.0, std::ceil(ymax * 20.0) / 20.0);
  double x0 = 0, x1 = 1;
  if (!profile.layers.empty()) {
    x0 = static_cast<double>(profile.layers.front());
    x1 = static_cast<double>(profile.layers.back());
    if (x1 == x0) {
      x0 -= 0.5;
      x1 += 0.5;
    }
  }

  std::string out = svg_open(W, H);
  out += "<!-- memprobe-data\nlayer";
  for (double t : kUpdateThresholds) out += fmt::format(",all_gt_{0},attn_gt_{0},mlp_gt_{0}", t);
  out += "\n";
  for (std::size_t k = 0; k < profile.layers.size(); ++k) {
    out += std::to_string(profile.layers[k]);
    for (const auto& s : profile.by_threshold)
      out += fmt::format(",{},{},{}", s.all[k], s.attention[k], s.mlp[k]);
    out += "\n";
  }
  out += "-->\n";

  const std::array<std::string_view, 3> titles = {"all modules", "self-attention", "MLP"};
  for (std::size_t p = 0; p < 3; ++p) {
    const double T = 20.0 + static_cast<double>(p) * panel_h, B = T + panel_h - 40;
    const Axis ax{x0, x1, L, R};
    const Axis ay{0.0, ymax, B, T};
    out += frame(L, T, R, B);
    out += text((L + R) / 2, T - 4, titles[p]);
    for (int k = 0; k <= 4; ++k) out += tick_y(ay, ymax * k / 4.0, L, fmt::format("{:.3g}", ymax * k / 4.0));
    for (std::size_t k : profile.layers)
      if (profile.layers.size() <= 20 || k % 10 == 0) out += tick_x(ax, static_cast<double>(k), B, std::to_string(k));
    for (std::size_t i = 0; i < kUpdateThresholds.size(); ++i) {
      const auto& s = profile.by_threshold[i];
      const std::vector<double>& series = p == 0 ? s.all : p == 1 ? s.attention : s.mlp;
      std::vector<std::pair<double, double>> pts;
      for (std::size_t k = 0; k < profile.layers.size(); ++k)
        pts.emplace_back(ax(static_cast<double>(profile.layers[k])), ay(series[k]));
      out += polyline(pts, threshold_color(i));
    }
  }
  double lx = L;
  for (std::size_t i = 0; i < kUpdateThresholds.size(); ++i, lx += 150) {
    out += fmt::format("<line x1=\"{:.2f}\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" stroke=\"{}\" stroke-width=\"2\"/>\n",
                       lx, H - 14.0, lx + 20, H - 14.0, threshold_color(i));
    out += text(lx + 24, H - 10.0, threshold_label(kUpdateThresholds[i]), "start");
  }
  out += text(R, H - 10.0, "layer index", "end");
  out += "</svg>\n";
  return out;
}

std::string render_histogram_svg(const LogHistogram& hist) {
  constexpr int W = 640, H = 420;
  constexpr double L = 70, R = 620, T = 20, B = 360;
  std::uint64_t cmax = 1;
  for (auto c : hist.counts()) cmax = std::max(cmax, c);
  const double ytop = std::max(1.0, std::ceil(std::log10(static_cast<double>(cmax))));
  const double yfloor = -0.5;  // a single count still gets a visible bar
  const Axis ax{LogHistogram::kLogLo, LogHistogram::kLogHi, L, R};
  const Axis ay{yfloor, ytop, B, T};

  std::string out = svg_open(W, H);
  out += fmt::format("<!-- memprobe-data\nbin_lo,bin_hi,count\n0,{},{}\n", LogHistogram::edge(0), hist.underflow());
  for (std::size_t k = 0; k < LogHistogram::kBins; ++k)
    out += fmt::format("{},{},{}\n", LogHistogram::edge(k), LogHistogram::edge(k + 1), hist.counts()[k]);
  out += fmt::format("{},inf,{}\n-->\n", LogHistogram::edge(LogHistogram::kBins), hist.overflow());
  out += frame(L, T, R, B);
  for (int e = static_cast<int>(LogHistogram::kLogLo); e <= static_cast<int>(LogHistogram::kLogHi); e += 2)
    out += tick_x(ax, e, B, fmt::format("1e{}", e));
  for (int e = 0; e <= static_cast<int>(ytop); ++e) out += tick_y(ay, e, L, fmt::format("1e{}", e));
  for (std::size_t k = 0; k < LogHistogram::kBins; ++k) {
    const auto c = hist.counts()[k];
    if (c == 0) continue;
    const double xa = ax(LogHistogram::kLogLo + static_cast<double>(k) / 10.0);
    const double xb = ax(LogHistogram::kLogLo + static_cast<double>(k + 1) / 10.0);
    const double y = ay(std::log10(static_cast<double>(c)));
    out += fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"{}\"/>\n", xa, y,
                       xb - xa, B - y, kBlue);
  }
  out += text((L + R) / 2, H - 20, "relative update |W_update / W_base| (log scale)");
  out += fmt::format("<text x=\"18\" y=\"{0:.2f}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {0:.2f})\">count "
                     "(log scale)</text>\n",
                     (T + B) / 2);
  out += "</svg>\n";
  return out;
}

std::vector<std::pair<std::string, std::string>> open_question_flags(const ReportInput& in) {
  return {
      {"trim_tokenizer", "boilerplate margins are counted with the configured tokenizer, not a fixed model tokenizer"},
      {"metric_granularity", fmt::format("all six metrics compare {} units", in.granularity)},
      {"bleu_smoothing", "zero n-gram precisions replaced by 1e-9/total; n-gram order capped at hypothesis length"},
      {"rouge_l_variant", "LCS-based F1"},
      {"system_prompt",
       in.system_prompt_is_default
           ? "baseline chat extraction used the default memory-assistant SFT system string; the original baseline "
             "system prompt is unstated"
           : "baseline chat extraction used a configured system prompt"},
      {"correlation_method", "the reference coefficient of 0.5 names no method; pearson_raw, pearson_log1p_ratings "
                             "and spearman are all reported, spearman is the headline"},
      {"chunk_enumeration", "chunks are enumerated over the trimmed token stream; the final partial window is dropped"},
      {"sft_sampling", "SFT samples are drawn uniformly over chunks, not stratified by book"},
      {"update_fraction_basis", "LoRA update fractions are weight counts over entries with nonzero base weight"},
      {"zero_base_weights", "base weights equal to zero are masked out of W_rel and counted separately"},
  };
}

std::string report_json(const ReportInput& in) {
  nlohmann::ordered_json j;
  j["schema"] = 1;
  j["config_fingerprint"] = in.config_fingerprint;
  j["endpoint_fingerprint"] = in.endpoint_fingerprint;
  j["model"] = in.model_name;
  j["prompt_mode"] = in.prompt_mode;
  j["granularity"] = in.granularity;
  j["system_prompt"] = {{"text", in.system_prompt},
                        {"provenance", in.system_prompt_is_default ? "default-sft-system-string" : "configured"}};
  if (in.chunk_stats) {
    j["chunk_stats"] = {{"books", in.chunk_stats->books},
                        {"total", in.chunk_stats->total},
                        {"min_per_book", in.chunk_stats->min_per_book},
                        {"max_per_book", in.chunk_stats->max_per_book}};
  } else {
    j["chunk_stats"] = nullptr;
  }
  j["artifacts"] = in.artifacts;
  auto& books = j["summaries"] = nlohmann::ordered_json::array();
  for (const auto& s : in.summaries) {
    nlohmann::ordered_json b;
    b["book_id"] = s.book_id;
    b["title"] = s.title;
    b["ratings"] = s.ratings_count;
    b["post_cutoff"] = s.post_cutoff;
    b["n_chunks"] = s.n_scored;
    nlohmann::ordered_json med;
    for (std::size_t m = 0; m < kMetricCount; ++m) med[std::string(kMetricNames[m])] = s.medians[m];
    b["medians"] = med;
    books.push_back(b);
  }
  auto& corr = j["correlations"] = nlohmann::ordered_json::array();
  for (const auto& c : in.correlations)
    corr.push_back({{"metric", metric_name(c.metric)},
                    {"method", to_string(c.method)},
                    {"coefficient", c.coefficient},
                    {"n", c.n},
                    {"headline", c.method == CorrelationMethod::spearman}});
  j["correlation_errors"] = in.correlation_errors;
  nlohmann::ordered_json flags;
  for (const auto& [k, v] : open_question_flags(in)) flags[k] = v;
  j["open_questions"] = flags;
  j["warnings"] = in.warnings;
  return j.dump(2) + "\n";
}

std::string report_text(const ReportInput& in) {
  std::string out;
  out += "memprobe report\n";
  out += fmt::format("config fingerprint:   {}\n", in.config_fingerprint);
  out += fmt::format("endpoint fingerprint: {}\n", in.endpoint_fingerprint.empty() ? "-" : in.endpoint_fingerprint);
  out += fmt::format("model: {}  prompt mode: {}  units: {}\n", in.model_name, in.prompt_mode, in.granularity);
  out += fmt::format("system prompt ({}): {}\n", in.system_prompt_is_default ? "default SFT string" : "configured",
                     in.system_prompt);
  if (in.chunk_stats)
    out += fmt::format("chunks: {} over {} books (min {}, max {})\n", in.chunk_stats->total, in.chunk_stats->books,
                       in.chunk_stats->min_per_book, in.chunk_stats->max_per_book);
  out += "\nper-book medians\n";
  out += fmt::format("{:<24} {:>10} {:>4} {:>6}", "book_id", "ratings", "post", "chunks");
  for (auto name : kMetricNames) out += fmt::format(" {:>11}", name);
  out += "\n";
  for (const auto& s : in.summaries) {
    out += fmt::format("{:<24} {:>10} {:>4} {:>6}", s.book_id, s.ratings_count, s.post_cutoff ? "*" : "", s.n_scored);
    for (double v : s.medians) out += fmt::format(" {:>11.3f}", v);
    out += "\n";
  }
  out += "\ncorrelation with ratings\n";
  for (const auto& c : in.correlations)
    out += fmt::format("  {:<12} {:<22} r = {:+.4f} (n = {}){}\n", metric_name(c.metric), to_string(c.method),
                       c.coefficient, c.n, c.method == CorrelationMethod::spearman ? "  [headline]" : "");
  for (const auto& e : in.correlation_errors) out += "  " + e + "\n";
  out += "\nopen questions\n";
  for (const auto& [k, v] : open_question_flags(in)) out += fmt::format("  {}: {}\n", k, v);
  if (!in.warnings.empty()) {
    out += "\nwarnings\n";
    for (const auto& w : in.warnings) out += "  " + w + "\n";
  }
  return out;
}

}  // namespace memprobe
