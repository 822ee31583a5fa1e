// memprobe: stage-by-stage driver for the memorization-probing pipeline.
//
// Precedence for every setting: built-in default < --config file <
// MEMPROBE_ENDPOINT (endpoint URL only) < command-line flag.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <pthread.h>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <nlohmann/json.hpp>

#include "memprobe/chunking.hpp"
#include "memprobe/config.hpp"
#include "memprobe/corpus.hpp"
#include "memprobe/extraction.hpp"
#include "memprobe/generation.hpp"
#include "memprobe/lora_audit.hpp"
#include "memprobe/metrics.hpp"
#include "memprobe/mock_server.hpp"
#include "memprobe/parallel.hpp"
#include "memprobe/reporting.hpp"
#include "memprobe/sft.hpp"
#include "memprobe/tokenization.hpp"

namespace fs = std::filesystem;
using namespace memprobe;

namespace {

/// Failure of one stage; printed as a single machine-parsable line.
struct StageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Artifact names inside the output directory.
constexpr const char* kBooks = "books.jsonl";
constexpr const char* kChunks = "chunks.jsonl";
constexpr const char* kChunkStats = "chunk_stats.json";
constexpr const char* kGenerations = "generations.jsonl";
constexpr const char* kManifest = "generations.manifest.jsonl";
constexpr const char* kGenerationsAr = "generations_ar.jsonl";
constexpr const char* kScores = "scores.csv";
constexpr const char* kScoresAr = "scores_ar.csv";
constexpr const char* kSummaries = "summaries.csv";
constexpr const char* kSummariesAr = "summaries_ar.csv";

struct CommonFlags {
  std::string config;
  std::optional<std::string> out_dir;
  std::optional<std::string> tokenizer;
  std::optional<std::string> vocab;
  std::optional<std::string> merges;
  std::optional<std::size_t> prefix_len;
  std::optional<std::size_t> target_len;
  std::optional<std::size_t> stride;
  std::optional<std::size_t> threads;
};

struct EndpointFlags {
  std::optional<std::string> url;
  std::optional<std::string> model;
  std::optional<std::string> mode;
  std::optional<std::string> system_prompt;
  std::optional<std::size_t> max_in_flight;
  std::optional<std::size_t> max_retries;
  std::optional<double> timeout;
};

void add_common(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--config", f.config, "Run configuration JSON")->check(CLI::ExistingFile);
  sub->add_option("--out-dir", f.out_dir, "Directory holding stage artifacts (config: out_dir)");
  sub->add_option("--tokenizer", f.tokenizer, "whitespace | bpe (config: tokenizer.kind)");
  sub->add_option("--vocab", f.vocab, "BPE vocabulary JSON (config: tokenizer.vocab)");
  sub->add_option("--merges", f.merges, "BPE merges file (config: tokenizer.merges)");
  sub->add_option("--prefix-len", f.prefix_len, "Prefix tokens per chunk (config: chunk.prefix_len)");
  sub->add_option("--target-len", f.target_len, "Target tokens per chunk (config: chunk.target_len)");
  sub->add_option("--stride", f.stride, "Chunk stride in tokens (config: chunk.stride)");
  sub->add_option("--threads", f.threads, "Worker threads, 0 = all cores (config: threads)");
}

void add_endpoint(CLI::App* sub, EndpointFlags& f) {
  sub->add_option("--endpoint", f.url, "Inference server base URL (config: endpoint.base_url; env MEMPROBE_ENDPOINT)");
  sub->add_option("--model", f.model, "Model name sent with each request (config: endpoint.model)");
  sub->add_option("--mode", f.mode, "raw | chat (config: endpoint.mode)")->check(CLI::IsMember({"raw", "chat"}));
  sub->add_option("--system-prompt", f.system_prompt, "Chat-mode system message (config: endpoint.system_prompt)");
  sub->add_option("--max-in-flight", f.max_in_flight, "Concurrent requests (config: endpoint.max_in_flight)")
      ->check(CLI::PositiveNumber);
  sub->add_option("--max-retries", f.max_retries, "Retries per request on transient errors (config: endpoint.max_retries)");
  sub->add_option("--timeout", f.timeout, "Per-request timeout in seconds (config: endpoint.request_timeout_s)");
}

RunConfig resolve_config(const CommonFlags& c, const EndpointFlags* e) {
  RunConfig cfg = c.config.empty() ? parse_config("{}") : load_config(c.config);
  apply_environment(cfg);
  if (c.out_dir) cfg.out_dir = *c.out_dir;
  if (c.tokenizer) cfg.tokenizer.kind = *c.tokenizer;
  if (c.vocab) cfg.tokenizer.vocab = *c.vocab;
  if (c.merges) cfg.tokenizer.merges = *c.merges;
  if (c.prefix_len) cfg.chunk.prefix_len = *c.prefix_len;
  if (c.target_len) {
    cfg.chunk.target_len = *c.target_len;
    cfg.endpoint.max_new_tokens = *c.target_len;
  }
  if (c.stride) cfg.chunk.stride = *c.stride;
  if (c.threads) cfg.threads = *c.threads;
  if (cfg.threads == 0) cfg.threads = default_threads();
  try {
    cfg.chunk.validate();
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(ex.what());
  }
  if (e) {
    auto& ep = cfg.endpoint;
    if (e->url) ep.base_url = *e->url;
    if (e->model) ep.model_name = *e->model;
    if (e->mode) ep.mode = parse_prompt_mode(*e->mode);
    if (e->system_prompt) {
      ep.system_prompt = *e->system_prompt;
      cfg.system_prompt_is_default = ep.system_prompt == kMemorySystemPrompt;
    }
    if (e->max_in_flight) ep.max_in_flight = *e->max_in_flight;
    if (e->max_retries) ep.max_retries = *e->max_retries;
    if (e->timeout) ep.request_timeout_s = *e->timeout;
  }
  return cfg;
}

void require_file(const fs::path& p, std::string_view what) {
  if (p.empty()) throw ConfigError(fmt::format("{} is not configured", what));
  if (!fs::exists(p)) throw ConfigError(fmt::format("{} does not exist: {}", what, p.string()));
}

fs::path artifact(const RunConfig& cfg, std::string_view name) { return cfg.out_dir / name; }

fs::path require_artifact(const RunConfig& cfg, std::string_view name, std::string_view producer) {
  fs::path p = artifact(cfg, name);
  if (!fs::exists(p))
    throw StageError(fmt::format("missing artifact {}; run '{}' first", p.string(), producer));
  return p;
}

std::ofstream open_out(const fs::path& p) {
  fs::create_directories(p.parent_path().empty() ? fs::path(".") : p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw StageError("cannot write " + p.string());
  return out;
}

void write_text(const fs::path& p, std::string_view text) {
  auto out = open_out(p);
  out << text;
}

Catalog load_books(const RunConfig& cfg) {
  std::ifstream in(require_artifact(cfg, kBooks, "ingest"), std::ios::binary);
  return read_books_jsonl(in, cfg.cutoff);
}

std::shared_ptr<const Tokenizer> tokenizer_for(const RunConfig& cfg) {
  if (cfg.tokenizer.kind == "bpe") {
    require_file(cfg.tokenizer.vocab, "tokenizer.vocab");
    require_file(cfg.tokenizer.merges, "tokenizer.merges");
  }
  return make_tokenizer(cfg.tokenizer);
}

ArtifactMeta meta_for(const RunConfig& cfg, std::string stage) {
  ArtifactMeta m;
  m.stage = std::move(stage);
  m.config_fingerprint = config_fingerprint(cfg);
  return m;
}

// ---------------------------------------------------------------- ingest

struct IngestFlags {
  std::optional<std::string> catalog, text_dir, cutoff;
  std::optional<std::size_t> head, tail;
};

int run_ingest(RunConfig cfg, const IngestFlags& f) {
  if (f.catalog) cfg.catalog = *f.catalog;
  if (f.text_dir) cfg.text_dir = *f.text_dir;
  if (f.head) cfg.trim.head_tokens = *f.head;
  if (f.tail) cfg.trim.tail_tokens = *f.tail;
  if (f.cutoff) {
    auto d = parse_iso_date(*f.cutoff);
    if (!d) throw ConfigError(fmt::format("--cutoff '{}' is not YYYY-MM-DD", *f.cutoff));
    cfg.cutoff = *d;
  }
  require_file(cfg.catalog, "catalog");
  require_file(cfg.text_dir, "text_dir");
  auto tok = tokenizer_for(cfg);
  Catalog catalog = load_catalog(cfg.catalog, cfg.text_dir, cfg.cutoff);
  parallel_for(catalog.books.size(), cfg.threads, [&](std::size_t k) {
    catalog.books[k] = trim_boilerplate(std::move(catalog.books[k]), *tok, cfg.trim);
  });
  const fs::path out_path = artifact(cfg, kBooks);
  {
    auto out = open_out(out_path);
    write_books_jsonl(out, catalog);
  }
  write_meta(out_path, meta_for(cfg, "ingest"));
  std::size_t usable = 0;
  for (const auto& b : catalog.books) {
    usable += b.usable;
    if (!b.usable)
      fmt::print(stderr, "warning: book '{}' has {} tokens, too few to trim {}+{}; marked unusable\n", b.book_id,
                 b.token_count, cfg.trim.head_tokens, cfg.trim.tail_tokens);
  }
  fmt::print("ingest: {} books ({} usable) -> {}\n", catalog.books.size(), usable, out_path.string());
  return 0;
}

// ---------------------------------------------------------------- chunk

int run_chunk(const RunConfig& cfg) {
  auto tok = tokenizer_for(cfg);
  Catalog catalog = load_books(cfg);
  std::vector<std::vector<Chunk>> per_book(catalog.books.size());
  parallel_for(catalog.books.size(), cfg.threads,
               [&](std::size_t k) { per_book[k] = make_chunks(catalog.books[k], *tok, cfg.chunk); });
  const fs::path out_path = artifact(cfg, kChunks);
  std::vector<std::size_t> counts;
  nlohmann::ordered_json per_book_json = nlohmann::ordered_json::object();
  {
    auto out = open_out(out_path);
    for (std::size_t k = 0; k < per_book.size(); ++k) {
      for (const auto& c : per_book[k]) write_chunk_jsonl(out, c);
      counts.push_back(per_book[k].size());
      per_book_json[catalog.books[k].book_id] = per_book[k].size();
    }
  }
  write_meta(out_path, meta_for(cfg, "chunk"));
  const ChunkStats stats = chunk_stats(counts);
  nlohmann::ordered_json j;
  j["books"] = stats.books;
  j["total"] = stats.total;
  j["min_per_book"] = stats.min_per_book;
  j["max_per_book"] = stats.max_per_book;
  j["per_book"] = per_book_json;
  const fs::path stats_path = artifact(cfg, kChunkStats);
  write_text(stats_path, j.dump(2) + "\n");
  write_meta(stats_path, meta_for(cfg, "chunk"));
  fmt::print("chunk: {} chunks over {} books (min {}, max {}) -> {}\n", stats.total, stats.books, stats.min_per_book,
             stats.max_per_book, out_path.string());
  return 0;
}

// ---------------------------------------------------------------- extract

struct ExtractFlags {
  std::optional<std::size_t> max_chunks_per_book;
  bool fresh = false;
};

int run_extract(const RunConfig& cfg, const ExtractFlags& f) {
  auto tok = tokenizer_for(cfg);
  std::vector<Chunk> chunks;
  {
    std::ifstream in(require_artifact(cfg, kChunks, "chunk"), std::ios::binary);
    chunks = read_chunks_jsonl(in, *tok);
  }
  if (f.max_chunks_per_book) {
    std::erase_if(chunks, [&](const Chunk& c) { return c.index >= *f.max_chunks_per_book; });
  }
  if (chunks.empty()) throw StageError("no chunks to extract");

  ArtifactMeta meta = meta_for(cfg, "extract");
  meta.endpoint_fingerprint = endpoint_fingerprint(cfg.endpoint);
  const fs::path manifest = artifact(cfg, kManifest);
  if (f.fresh) {
    fs::remove(manifest);
    fs::remove(meta_path(manifest));
  }
  if (fs::exists(manifest)) {
    auto old = read_meta(manifest);
    if (!old || old->config_fingerprint != meta.config_fingerprint ||
        old->endpoint_fingerprint != meta.endpoint_fingerprint)
      throw StageError(fmt::format("run manifest {} belongs to a different configuration; pass --fresh to discard it",
                                   manifest.string()));
  } else {
    fs::create_directories(cfg.out_dir);
    write_meta(manifest, meta);
  }

  PiecewiseOptions opts;
  opts.manifest = manifest;
  auto records = run_piecewise(cfg.endpoint, chunks, *tok, opts);
  const fs::path out_path = artifact(cfg, kGenerations);
  {
    auto out = open_out(out_path);
    for (const auto& r : records) write_generation_jsonl(out, r);
  }
  write_meta(out_path, meta);
  fmt::print("extract: {} generations ({} mode) -> {}\n", records.size(), to_string(cfg.endpoint.mode),
             out_path.string());
  return 0;
}

// ---------------------------------------------------------------- extract-ar

struct ExtractArFlags {
  std::optional<std::size_t> max_steps;
  std::vector<std::string> books;
};

int run_extract_ar(const RunConfig& cfg, const ExtractArFlags& f) {
  auto tok = tokenizer_for(cfg);
  Catalog catalog = load_books(cfg);
  const std::set<std::string> wanted(f.books.begin(), f.books.end());
  for (const auto& id : wanted)
    if (!catalog.find(id)) throw StageError(fmt::format("unknown book '{}'", id));

  ArtifactMeta meta = meta_for(cfg, "extract-ar");
  meta.endpoint_fingerprint = endpoint_fingerprint(cfg.endpoint);
  const std::size_t max_steps = f.max_steps.value_or(std::numeric_limits<std::size_t>::max());
  const fs::path out_path = artifact(cfg, kGenerationsAr);
  auto out = open_out(out_path);
  std::vector<std::string> failures;
  std::size_t runs = 0;
  for (const auto& book : catalog.books) {
    if (!wanted.empty() && !wanted.count(book.book_id)) continue;
    if (!book.usable || book.trimmed_token_count < cfg.chunk.prefix_len) {
      fmt::print(stderr, "warning: book '{}' skipped: fewer than {} trimmed tokens\n", book.book_id,
                 cfg.chunk.prefix_len);
      continue;
    }
    auto result = run_autoregressive(cfg.endpoint, book, *tok, cfg.chunk, max_steps);
    write_generation_jsonl(out, result.record);
    out.flush();
    ++runs;
    if (result.record.truncated) failures.push_back(fmt::format("book {}: {}", book.book_id, result.error));
  }
  out.close();
  write_meta(out_path, meta);
  if (!failures.empty())
    throw StageError(fmt::format("{} run(s) truncated; partial transcripts kept in {}: {}", failures.size(),
                                 out_path.string(), failures.front()));
  fmt::print("extract-ar: {} transcripts -> {}\n", runs, out_path.string());
  return 0;
}

// ---------------------------------------------------------------- score

struct ScoreFlags {
  std::optional<std::string> granularity;
  std::optional<std::string> input, output;
  bool autoregressive = false;
  bool multiset = false;
};

int run_score(RunConfig cfg, const ScoreFlags& f) {
  if (f.granularity) cfg.granularity = parse_granularity(*f.granularity);
  auto tok = tokenizer_for(cfg);
  const fs::path in_path = f.input ? fs::path(*f.input) : artifact(cfg, f.autoregressive ? kGenerationsAr : kGenerations);
  if (!fs::exists(in_path))
    throw StageError(fmt::format("missing artifact {}; run '{}' first", in_path.string(),
                                 f.autoregressive ? "extract-ar" : "extract"));
  std::vector<GenerationRecord> records;
  {
    std::ifstream in(in_path, std::ios::binary);
    records = read_generations_jsonl(in, *tok);
  }
  bool need_chunks = false, need_books = false;
  for (const auto& r : records) (r.mode == GenerationMode::piecewise ? need_chunks : need_books) = true;
  std::vector<Chunk> chunks;
  if (need_chunks) {
    std::ifstream in(require_artifact(cfg, kChunks, "chunk"), std::ios::binary);
    chunks = read_chunks_jsonl(in, *tok);
  }
  Catalog catalog;
  if (need_books) catalog = load_books(cfg);

  ScoringOptions opts;
  opts.granularity = cfg.granularity;
  opts.tokenizer = tok.get();
  opts.multiset_jaccard = f.multiset;
  opts.threads = cfg.threads;
  auto scores = score_all(records, chunks, catalog, cfg.chunk, opts);

  const fs::path out_path = f.output ? fs::path(*f.output) : artifact(cfg, f.autoregressive ? kScoresAr : kScores);
  {
    auto out = open_out(out_path);
    write_scores_csv(out, scores);
  }
  ArtifactMeta meta = meta_for(cfg, "score");
  if (auto upstream = read_meta(in_path)) meta.endpoint_fingerprint = upstream->endpoint_fingerprint;
  meta.granularity = std::string(to_string(cfg.granularity));
  write_meta(out_path, meta);
  fmt::print("score: {} records ({} units) -> {}\n", scores.size(), to_string(cfg.granularity), out_path.string());
  return 0;
}

// ---------------------------------------------------------------- summarize

struct SummarizeFlags {
  std::optional<std::string> input, output;
  bool autoregressive = false;
};

int run_summarize(const RunConfig& cfg, const SummarizeFlags& f) {
  const fs::path in_path = f.input ? fs::path(*f.input) : artifact(cfg, f.autoregressive ? kScoresAr : kScores);
  if (!fs::exists(in_path)) throw StageError(fmt::format("missing artifact {}; run 'score' first", in_path.string()));
  auto scores = read_scores_csv(read_file(in_path));
  Catalog catalog = load_books(cfg);
  auto result = summarize(scores, catalog);
  for (const auto& w : result.warnings) fmt::print(stderr, "warning: {}\n", w);
  const fs::path out_path =
      f.output ? fs::path(*f.output) : artifact(cfg, f.autoregressive ? kSummariesAr : kSummaries);
  {
    auto out = open_out(out_path);
    write_summaries_csv(out, result.summaries);
  }
  ArtifactMeta meta = meta_for(cfg, "summarize");
  if (auto upstream = read_meta(in_path)) {
    meta.endpoint_fingerprint = upstream->endpoint_fingerprint;
    meta.granularity = upstream->granularity;
  }
  write_meta(out_path, meta);
  fmt::print("summarize: {} books -> {}\n", result.summaries.size(), out_path.string());
  return 0;
}

// ---------------------------------------------------------------- report

struct ReportFlags {
  std::optional<std::string> summaries;
  bool force = false;
};

int run_report(const RunConfig& cfg, const ReportFlags& f) {
  const fs::path sum_path = f.summaries ? fs::path(*f.summaries) : artifact(cfg, kSummaries);
  if (!fs::exists(sum_path))
    throw StageError(fmt::format("missing artifact {}; run 'summarize' first", sum_path.string()));

  // Every artifact present must come from the configuration producing this report.
  const std::string fingerprint = config_fingerprint(cfg);
  std::map<std::string, std::vector<std::string>> seen;  // fingerprint -> artifacts
  seen[fingerprint].push_back("(this report)");
  ReportInput in;
  std::vector<fs::path> candidates{sum_path};
  for (const char* name : {kBooks, kChunks, kGenerations, kGenerationsAr, kScores, kScoresAr, kSummariesAr})
    if (fs::exists(artifact(cfg, name)) && artifact(cfg, name) != sum_path) candidates.push_back(artifact(cfg, name));
  for (const auto& p : candidates) {
    auto m = read_meta(p);
    const std::string fp = m ? m->config_fingerprint : std::string("(none)");
    seen[fp].push_back(p.filename().string());
    in.artifacts[p.filename().string()] = fs::relative(p, cfg.out_dir).generic_string();
    if (m && !m->endpoint_fingerprint.empty() && in.endpoint_fingerprint.empty())
      in.endpoint_fingerprint = m->endpoint_fingerprint;
    if (m && !m->granularity.empty() && p == sum_path) in.granularity = m->granularity;
  }
  if (seen.size() > 1) {
    std::string detail;
    for (const auto& [fp, files] : seen)
      detail += fmt::format(" [{}: {}]", fp.substr(0, 12), fmt::join(files, ", "));
    if (!f.force) throw StageError("artifacts come from different configurations; pass --force to mix them:" + detail);
    in.warnings.push_back("mixed configurations (--force):" + detail);
  }

  in.config_fingerprint = fingerprint;
  in.model_name = cfg.endpoint.model_name;
  in.prompt_mode = std::string(to_string(cfg.endpoint.mode));
  if (in.granularity.empty()) in.granularity = std::string(to_string(cfg.granularity));
  in.system_prompt = cfg.endpoint.system_prompt;
  in.system_prompt_is_default = cfg.system_prompt_is_default;
  if (fs::exists(artifact(cfg, kChunkStats))) {
    auto j = nlohmann::json::parse(read_file(artifact(cfg, kChunkStats)));
    ChunkStats s;
    s.books = j.at("books").get<std::size_t>();
    s.total = j.at("total").get<std::size_t>();
    s.min_per_book = j.at("min_per_book").get<std::size_t>();
    s.max_per_book = j.at("max_per_book").get<std::size_t>();
    in.chunk_stats = s;
  }
  in.summaries = read_summaries_csv(read_file(sum_path));
  for (std::size_t m = 0; m < kMetricCount; ++m) {
    for (auto method : kCorrelationMethods) {
      try {
        in.correlations.push_back(correlate(in.summaries, static_cast<Metric>(m), method));
      } catch (const std::exception& e) {
        in.correlation_errors.push_back(fmt::format("{}/{}: {}", kMetricNames[m], to_string(method), e.what()));
      }
    }
  }
  for (std::size_t m = 0; m < kMetricCount; ++m) {
    const fs::path svg = artifact(cfg, fmt::format("scatter_{}.svg", kMetricNames[m]));
    write_text(svg, render_scatter_svg(in.summaries, static_cast<Metric>(m)));
    in.artifacts[svg.filename().string()] = svg.filename().string();
  }
  write_text(artifact(cfg, "report.json"), report_json(in));
  write_text(artifact(cfg, "report.txt"), report_text(in));
  fmt::print("report: {} books -> {}\n", in.summaries.size(), artifact(cfg, "report.json").string());
  return 0;
}

// ---------------------------------------------------------------- sft-prep

struct SftFlags {
  std::optional<std::size_t> samples;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, train_catalog, train_text_dir, extraction_catalog;
};

int run_sft(RunConfig cfg, const SftFlags& f) {
  if (f.train_catalog) cfg.train_catalog = *f.train_catalog;
  if (f.train_text_dir) cfg.train_text_dir = *f.train_text_dir;
  if (f.extraction_catalog) cfg.catalog = *f.extraction_catalog;
  if (f.seed) cfg.seed = *f.seed;
  require_file(cfg.train_catalog, "train_catalog");
  require_file(cfg.train_text_dir, "train_text_dir");
  auto tok = tokenizer_for(cfg);

  std::vector<std::string> extraction_ids;
  if (!cfg.catalog.empty()) {
    require_file(cfg.catalog, "catalog");
    extraction_ids = parse_catalog(read_file(cfg.catalog), cfg.cutoff).ids();
  } else {
    fmt::print(stderr, "warning: no extraction catalog configured; disjointness not checked\n");
  }
  Catalog train = load_catalog(cfg.train_catalog, cfg.train_text_dir, cfg.cutoff);
  parallel_for(train.books.size(), cfg.threads,
               [&](std::size_t k) { train.books[k] = trim_boilerplate(std::move(train.books[k]), *tok, cfg.trim); });

  SftOptions opts;
  opts.n_samples = f.samples.value_or(opts.n_samples);
  opts.seed = cfg.seed;
  auto samples = build_sft_dataset(train, extraction_ids, *tok, cfg.chunk, opts);
  const fs::path out_path = f.out ? fs::path(*f.out) : artifact(cfg, fmt::format("sft_{}.jsonl", opts.n_samples));
  {
    auto out = open_out(out_path);
    write_sft_jsonl(out, samples);
  }
  write_meta(out_path, meta_for(cfg, "sft-prep"));
  fmt::print("sft-prep: {} samples (seed {}) -> {}\n", samples.size(), opts.seed, out_path.string());
  return 0;
}

// ---------------------------------------------------------------- lora-audit

struct LoraFlags {
  std::string base, adapter;
  std::optional<double> alpha;
  std::optional<std::size_t> rank;
  std::optional<std::string> naming;
  std::size_t block_rows = 256;
};

int run_lora(const RunConfig& cfg, const LoraFlags& f) {
  AuditOptions opts;
  opts.base = f.base;
  opts.adapter = f.adapter;
  opts.alpha = f.alpha;
  opts.rank = f.rank;
  if (f.naming) opts.naming = LayerNaming::from_file(*f.naming);
  opts.threads = cfg.threads;
  opts.block_rows = f.block_rows;
  const AuditResult r = run_audit(opts);

  const ArtifactMeta meta = meta_for(cfg, "lora-audit");
  auto emit = [&](const char* name, auto&& writer) {
    const fs::path p = artifact(cfg, name);
    {
      auto out = open_out(p);
      writer(out);
    }
    write_meta(p, meta);
  };
  emit("lora_layers.csv", [&](std::ostream& os) { write_layer_stats_csv(os, r.layers); });
  emit("lora_histogram.csv", [&](std::ostream& os) { write_histogram_csv(os, r.global.histogram); });
  emit("lora_depth.csv", [&](std::ostream& os) { write_depth_profile_csv(os, r.profile); });
  write_text(artifact(cfg, "lora_histogram.svg"), render_histogram_svg(r.global.histogram));
  write_text(artifact(cfg, "lora_depth.svg"), render_depth_profile_svg(r.profile));

  nlohmann::ordered_json j;
  j["schema"] = 1;
  j["alpha"] = r.alpha;
  j["rank"] = r.rank;
  j["hyperparameter_source"] = r.hyper_source;
  j["n_update_matrices"] = r.layers.size();
  std::uint64_t total = 0, zero = 0;
  for (const auto& s : r.layers) {
    total += s.acc.n_weights;
    zero += s.acc.n_zero_base;
  }
  j["n_weights"] = total;
  j["n_zero_base"] = zero;
  j["zero_base_policy"] = "masked";
  j["fraction_basis"] = "weight count over entries with nonzero base weight";
  nlohmann::ordered_json tails;
  for (std::size_t i = 0; i < kUpdateThresholds.size(); ++i)
    tails[fmt::format("gt_{}", kUpdateThresholds[i])] = r.global.fraction(i);
  j["global_fractions"] = tails;
  write_text(artifact(cfg, "lora_audit.json"), j.dump(2) + "\n");
  fmt::print("lora-audit: {} update matrices, alpha {} rank {} ({}); frac >0.01 = {:.6f}, >1.0 = {:.6f}\n",
             r.layers.size(), r.alpha, r.rank, r.hyper_source, r.global.fraction(0), r.global.fraction(2));
  return 0;
}

// ---------------------------------------------------------------- mock-serve

struct MockFlags {
  std::string behavior = "echo-truth";
  int port = 8000;
  std::string host = "127.0.0.1";
  std::optional<std::string> books, lookup;
  std::uint64_t seed = 0;
  std::size_t fail_first = 0;
};

int run_mock(const RunConfig& cfg, const MockFlags& f) {
  MockBehavior b = parse_mock_behavior(f.behavior);
  b.seed = f.seed;
  b.fail_first = f.fail_first;
  if (b.kind == MockKind::lookup) {
    if (!f.lookup) throw ConfigError("--behavior lookup needs --lookup FILE");
    auto j = nlohmann::json::parse(read_file(*f.lookup));
    for (const auto& [prompt, completion] : j.items()) b.table[prompt] = completion.get<std::string>();
  }
  std::vector<std::string> texts;
  if (b.kind == MockKind::echo_truth || b.kind == MockKind::truth_with_noise) {
    const fs::path books = f.books ? fs::path(*f.books) : artifact(cfg, kBooks);
    if (!fs::exists(books)) throw StageError(fmt::format("missing artifact {}; run 'ingest' first", books.string()));
    std::ifstream in(books, std::ios::binary);
    for (auto& book : read_books_jsonl(in).books) texts.push_back(std::move(book.trimmed_text));
  }

  // Block termination signals before the server thread starts so only
  // sigwait below sees them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);
  MockServer server(b, std::move(texts), f.port, f.host);
  fmt::print("listening on {}\n", server.base_url());
  std::fflush(stdout);
  int sig = 0;
  sigwait(&signals, &sig);
  server.stop();
  return 0;
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Measure verbatim memorization of books in language models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "memprobe 0.3.0");

  CommonFlags common;
  EndpointFlags endpoint;
  IngestFlags ingest;
  ExtractFlags extract;
  ExtractArFlags extract_ar;
  ScoreFlags score;
  SummarizeFlags summ;
  ReportFlags report;
  SftFlags sft;
  LoraFlags lora;
  MockFlags mock;

  auto* c_ingest = app.add_subcommand("ingest", "Load the catalog and book texts, trim boilerplate -> books.jsonl");
  add_common(c_ingest, common);
  c_ingest->add_option("--catalog", ingest.catalog, "Catalog CSV (config: catalog)");
  c_ingest->add_option("--text-dir", ingest.text_dir, "Directory of <book_id>.txt files (config: text_dir)");
  c_ingest->add_option("--head-tokens", ingest.head, "Tokens dropped from the start (config: trim.head_tokens)");
  c_ingest->add_option("--tail-tokens", ingest.tail, "Tokens dropped from the end (config: trim.tail_tokens)");
  c_ingest->add_option("--cutoff", ingest.cutoff, "Knowledge cutoff date YYYY-MM-DD (config: cutoff_date)");

  auto* c_chunk = app.add_subcommand("chunk", "Cut trimmed books into prefix/target chunks -> chunks.jsonl");
  add_common(c_chunk, common);

  auto* c_extract = app.add_subcommand("extract", "Piecewise extraction of every chunk -> generations.jsonl");
  add_common(c_extract, common);
  add_endpoint(c_extract, endpoint);
  c_extract->add_option("--max-chunks-per-book", extract.max_chunks_per_book, "Only the first N chunks of each book");
  c_extract->add_flag("--fresh", extract.fresh, "Discard the run manifest instead of resuming");

  auto* c_ar = app.add_subcommand("extract-ar", "Autoregressive reconstruction per book -> generations_ar.jsonl");
  add_common(c_ar, common);
  add_endpoint(c_ar, endpoint);
  c_ar->add_option("--max-steps", extract_ar.max_steps, "Step limit per book (default: until the book is covered)");
  c_ar->add_option("--book", extract_ar.books, "Restrict to these book ids (repeatable)");

  auto* c_score = app.add_subcommand("score", "Six-metric similarity per generation -> scores.csv");
  add_common(c_score, common);
  add_endpoint(c_score, endpoint);
  c_score->add_option("--granularity", score.granularity, "word | model-token | character (config: granularity)")
      ->check(CLI::IsMember({"word", "model-token", "character"}));
  c_score->add_option("--input", score.input, "Generations JSONL (default: out_dir/generations.jsonl)");
  c_score->add_option("--output", score.output, "Scores CSV (default: out_dir/scores.csv)");
  c_score->add_flag("--ar", score.autoregressive, "Score generations_ar.jsonl into scores_ar.csv");
  c_score->add_flag("--multiset-jaccard", score.multiset, "Use multiset instead of set Jaccard");

  auto* c_sum = app.add_subcommand("summarize", "Per-book medians -> summaries.csv");
  add_common(c_sum, common);
  add_endpoint(c_sum, endpoint);
  c_sum->add_option("--input", summ.input, "Scores CSV (default: out_dir/scores.csv)");
  c_sum->add_option("--output", summ.output, "Summaries CSV (default: out_dir/summaries.csv)");
  c_sum->add_flag("--ar", summ.autoregressive, "Summarize scores_ar.csv into summaries_ar.csv");

  auto* c_report = app.add_subcommand("report", "Correlations, plots and report.json/report.txt");
  add_common(c_report, common);
  add_endpoint(c_report, endpoint);
  c_report->add_option("--summaries", report.summaries, "Summaries CSV (default: out_dir/summaries.csv)");
  c_report->add_flag("--force", report.force, "Allow artifacts from different configurations");

  auto* c_sft = app.add_subcommand("sft-prep", "Sample SFT chat examples from the training books");
  add_common(c_sft, common);
  c_sft->add_option("--samples", sft.samples, "Number of samples (default 1000)");
  c_sft->add_option("--seed", sft.seed, "Sampling seed (config: seed)");
  c_sft->add_option("--out", sft.out, "Output JSONL (default: out_dir/sft_<N>.jsonl)");
  c_sft->add_option("--train-catalog", sft.train_catalog, "Training catalog CSV (config: train_catalog)");
  c_sft->add_option("--train-text-dir", sft.train_text_dir, "Training texts (config: train_text_dir)");
  c_sft->add_option("--catalog", sft.extraction_catalog, "Extraction catalog checked for overlap (config: catalog)");

  auto* c_lora = app.add_subcommand("lora-audit", "Relative LoRA update statistics -> lora_*.csv/svg/json");
  add_common(c_lora, common);
  c_lora->add_option("--base", lora.base, "Base-model tensor file")->required()->check(CLI::ExistingFile);
  c_lora->add_option("--adapter", lora.adapter, "Adapter tensor file")->required()->check(CLI::ExistingFile);
  c_lora->add_option("--alpha", lora.alpha, "LoRA alpha (overrides adapter_config.json)");
  c_lora->add_option("--rank", lora.rank, "LoRA rank (overrides adapter_config.json)");
  c_lora->add_option("--naming", lora.naming, "Layer-naming JSON for non-default tensor names")
      ->check(CLI::ExistingFile);
  c_lora->add_option("--block-rows", lora.block_rows, "Base rows streamed per block")->check(CLI::PositiveNumber);

  auto* c_mock = app.add_subcommand("mock-serve", "Serve a scripted completions endpoint for testing");
  add_common(c_mock, common);
  c_mock->add_option("--behavior", mock.behavior, "echo-truth | fixed[:TEXT] | noise:P | lookup");
  c_mock->add_option("--port", mock.port, "Port, 0 = any free port");
  c_mock->add_option("--host", mock.host, "Bind address");
  c_mock->add_option("--books", mock.books, "books.jsonl supplying ground truth (default: out_dir/books.jsonl)");
  c_mock->add_option("--lookup", mock.lookup, "JSON object prompt -> completion for --behavior lookup");
  c_mock->add_option("--seed", mock.seed, "Noise seed");
  c_mock->add_option("--fail-first", mock.fail_first, "Answer the first N requests with HTTP 500");

  std::string stage = "cli";
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    for (auto* sub : app.get_subcommands()) stage = sub->get_name();
    fmt::print(stderr, "error: stage={} message={}\n", stage, one_line(e.what()));
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  stage = sub->get_name();
  try {
    const bool uses_endpoint = stage == "extract" || stage == "extract-ar" || stage == "score" ||
                               stage == "summarize" || stage == "report";
    RunConfig cfg = resolve_config(common, uses_endpoint ? &endpoint : nullptr);
    if (stage == "ingest") return run_ingest(cfg, ingest);
    if (stage == "chunk") return run_chunk(cfg);
    if (stage == "extract") return run_extract(cfg, extract);
    if (stage == "extract-ar") return run_extract_ar(cfg, extract_ar);
    if (stage == "score") return run_score(cfg, score);
    if (stage == "summarize") return run_summarize(cfg, summ);
    if (stage == "report") return run_report(cfg, report);
    if (stage == "sft-prep") return run_sft(cfg, sft);
    if (stage == "lora-audit") return run_lora(cfg, lora);
    if (stage == "mock-serve") return run_mock(cfg, mock);
    throw StageError("unhandled subcommand");
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: stage={} message={}\n", stage, one_line(e.what()));
    return 1;
  }
}
