#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "memprobe/metrics.hpp"
#include "memprobe/mock_server.hpp"
#include "synthetic.hpp"

using namespace memprobe;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

Run memprobe_cli(const testing::TempDir& dir, const std::string& args) {
  const auto out = dir / "stdout.txt";
  const auto err = dir / "stderr.txt";
  const std::string cmd =
      std::string("'") + MEMPROBE_EXE + "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = testing::slurp(out);
  r.err = testing::slurp(err);
  return r;
}

std::string q(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

// Three books with 100-token margins on each side and two to four chunks each.
void write_extraction_corpus(const testing::TempDir& dir) {
  testing::write_corpus(dir / "corpus", {{"alpha", "Alpha, A Tale", 120, "1999-05-01", testing::random_words(820, 1)},
                                         {"beta", "Beta", 45000, "2005-01-01", testing::random_words(790, 2)},
                                         {"gamma", "Gamma", 0, "2024-03-01", testing::random_words(880, 3)}});
  nlohmann::json cfg = {{"catalog", (dir / "corpus" / "catalog.csv").string()},
                        {"text_dir", (dir / "corpus" / "texts").string()},
                        {"trim", {{"head_tokens", 100}, {"tail_tokens", 100}}},
                        {"out_dir", (dir / "out").string()},
                        {"endpoint", {{"model", "mock"}, {"max_in_flight", 2}, {"max_retries", 0}}}};
  std::ofstream(dir / "config.json") << cfg.dump(2);
}

std::vector<std::string> trimmed_texts(const std::filesystem::path& books_jsonl) {
  std::ifstream in(books_jsonl);
  std::vector<std::string> out;
  for (auto& b : read_books_jsonl(in).books) out.push_back(b.trimmed_text);
  return out;
}

}  // namespace

TEST_CASE("help and argument errors") {
  testing::TempDir dir;
  auto help = memprobe_cli(dir, "extract --help");
  CHECK(help.code == 0);
  CHECK(help.out.find("--max-in-flight") != std::string::npos);
  CHECK(help.out.find("--fresh") != std::string::npos);

  auto bad = memprobe_cli(dir, "score --bogus");
  CHECK(bad.code == 2);
  CHECK(bad.err.starts_with("error: stage=score message="));
  CHECK(std::count(bad.err.begin(), bad.err.end(), '\n') == 1);

  auto none = memprobe_cli(dir, "");
  CHECK(none.code != 0);

  auto missing = memprobe_cli(dir, "chunk --out-dir " + q(dir / "empty"));
  CHECK(missing.code == 1);
  CHECK(missing.err.starts_with("error: stage=chunk message=missing artifact"));

  std::ofstream(dir / "bad.json") << R"({"chunk": {"strides": 3}})";
  auto bad_cfg = memprobe_cli(dir, "chunk --config " + q(dir / "bad.json"));
  CHECK(bad_cfg.code == 1);
  CHECK(bad_cfg.err.find("config: unknown key 'chunk.strides'") != std::string::npos);
}

TEST_CASE("full pipeline against an echo-truth server gives medians of 1") {
  testing::TempDir dir;
  write_extraction_corpus(dir);
  const std::string cfg = "--config " + q(dir / "config.json");
  REQUIRE(memprobe_cli(dir, "ingest " + cfg).code == 0);
  REQUIRE(memprobe_cli(dir, "chunk " + cfg).code == 0);
  MockServer server({}, trimmed_texts(dir / "out" / "books.jsonl"));
  const std::string ep = " --endpoint " + server.base_url();
  auto ex = memprobe_cli(dir, "extract --mode raw " + cfg + ep);
  REQUIRE_MESSAGE(ex.code == 0, ex.err);
  REQUIRE(memprobe_cli(dir, "score " + cfg).code == 0);
  REQUIRE(memprobe_cli(dir, "summarize " + cfg).code == 0);

  auto summaries = read_summaries_csv(testing::slurp(dir / "out" / "summaries.csv"));
  REQUIRE(summaries.size() == 3);
  for (const auto& s : summaries) {
    CHECK(s.n_scored >= 2);
    for (double m : s.medians) CHECK(m == 1.0);
  }
  CHECK(summaries[0].title == "Alpha, A Tale");
  CHECK(summaries[2].post_cutoff);

  // A rerun resumes from the manifest and sends nothing new.
  server.clear_log();
  REQUIRE(memprobe_cli(dir, "extract " + cfg + ep).code == 0);
  CHECK(server.requests().empty());

  auto report = memprobe_cli(dir, "report " + cfg);
  REQUIRE_MESSAGE(report.code == 0, report.err);
  auto j = nlohmann::json::parse(testing::slurp(dir / "out" / "report.json"));
  CHECK(j["schema"] == 1);
  CHECK(j["summaries"].size() == 3);
  CHECK(j["system_prompt"]["provenance"] == "default-sft-system-string");
  CHECK(std::filesystem::exists(dir / "out" / "scatter_jaccard.svg"));
  auto meta = nlohmann::json::parse(testing::slurp(dir / "out" / "scores.csv.meta.json"));
  CHECK(meta["config_fingerprint"] == j["config_fingerprint"]);

  // Re-chunking under a different geometry leaves mixed fingerprints behind.
  REQUIRE(memprobe_cli(dir, "chunk --stride 15 " + cfg).code == 0);
  auto refused = memprobe_cli(dir, "report " + cfg);
  CHECK(refused.code == 1);
  CHECK(refused.err.find("--force") != std::string::npos);
  CHECK(memprobe_cli(dir, "report --force " + cfg).code == 0);
  auto forced = nlohmann::json::parse(testing::slurp(dir / "out" / "report.json"));
  CHECK_FALSE(forced["warnings"].empty());
}

TEST_CASE("fixed-junk extraction and autoregressive mode through the cli") {
  testing::TempDir dir;
  write_extraction_corpus(dir);
  const std::string cfg = "--config " + q(dir / "config.json");
  REQUIRE(memprobe_cli(dir, "ingest " + cfg).code == 0);
  REQUIRE(memprobe_cli(dir, "chunk " + cfg).code == 0);
  MockBehavior junk;
  junk.kind = MockKind::fixed_string;
  MockServer server(junk, {});
  REQUIRE(memprobe_cli(dir, "extract " + cfg + " --endpoint " + server.base_url()).code == 0);
  REQUIRE(memprobe_cli(dir, "score " + cfg).code == 0);
  REQUIRE(memprobe_cli(dir, "summarize " + cfg).code == 0);
  for (const auto& s : read_summaries_csv(testing::slurp(dir / "out" / "summaries.csv")))
    CHECK(s[Metric::jaccard] < 0.1);

  MockServer echo({}, trimmed_texts(dir / "out" / "books.jsonl"));
  auto ar = memprobe_cli(dir, "extract-ar --book beta " + cfg + " --endpoint " + echo.base_url());
  REQUIRE_MESSAGE(ar.code == 0, ar.err);
  REQUIRE(memprobe_cli(dir, "score --ar " + cfg).code == 0);
  REQUIRE(memprobe_cli(dir, "summarize --ar " + cfg).code == 0);
  auto ar_sum = read_summaries_csv(testing::slurp(dir / "out" / "summaries_ar.csv"));
  REQUIRE(ar_sum.size() == 1);
  for (double m : ar_sum[0].medians) CHECK(m == 1.0);
}

TEST_CASE("sft-prep is seed-deterministic") {
  testing::TempDir dir;
  testing::write_corpus(dir / "train", {{"t1", "T1", 1, "2001-01-01", testing::random_words(20000, 11)},
                                        {"t2", "T2", 1, "2001-01-01", testing::random_words(20000, 12)}});
  std::ofstream(dir / "config.json") << nlohmann::json{{"train_catalog", (dir / "train" / "catalog.csv").string()},
                                                       {"train_text_dir", (dir / "train" / "texts").string()},
                                                       {"trim", {{"head_tokens", 0}, {"tail_tokens", 0}}},
                                                       {"out_dir", (dir / "out").string()}}
                                            .dump();
  const std::string cfg = "--config " + q(dir / "config.json");
  REQUIRE(memprobe_cli(dir, "sft-prep --samples 1000 --seed 7 --out " + q(dir / "a.jsonl") + " " + cfg).code == 0);
  REQUIRE(memprobe_cli(dir, "sft-prep --samples 1000 --seed 7 --out " + q(dir / "b.jsonl") + " " + cfg).code == 0);
  const auto a = testing::slurp(dir / "a.jsonl");
  CHECK(a == testing::slurp(dir / "b.jsonl"));
  CHECK(std::count(a.begin(), a.end(), '\n') == 1000);
  REQUIRE(memprobe_cli(dir, "sft-prep --samples 1000 --seed 8 --out " + q(dir / "c.jsonl") + " " + cfg).code == 0);
  CHECK(a != testing::slurp(dir / "c.jsonl"));

  auto too_many = memprobe_cli(dir, "sft-prep --samples 5000 " + cfg);
  CHECK(too_many.code == 1);
  CHECK(too_many.err.find("error: stage=sft-prep message=requested 5000 samples") != std::string::npos);
}

TEST_CASE("lora-audit writes the statistics a naive recount produces") {
  testing::TempDir dir;
  auto lora = testing::make_synthetic_lora(3, 24, 40, 16, 32.0, 21, 0.1);
  testing::write_synthetic_lora(dir / "model", lora);
  auto run = memprobe_cli(dir, "lora-audit --alpha 32 --rank 16 --base " + q(dir / "model" / "base.safetensors") +
                                   " --adapter " + q(dir / "model" / "adapter.safetensors") + " --out-dir " +
                                   q(dir / "out"));
  REQUIRE_MESSAGE(run.code == 0, run.err);

  std::vector<UpdateStats> oracle;
  for (const auto& m : lora.modules) {
    UpdateStats s;
    s.key = m.key;
    for (Eigen::Index i = 0; i < m.B.rows(); ++i)
      for (Eigen::Index j = 0; j < m.A.cols(); ++j) {
        double u = 0;
        for (Eigen::Index k = 0; k < m.A.rows(); ++k) u += m.B(i, k) * m.A(k, j);
        u *= 32.0 / 16.0;
        ++s.acc.n_weights;
        if (m.base(i, j) == 0.0) {
          ++s.acc.n_zero_base;
          continue;
        }
        const double w = std::abs(u / m.base(i, j));
        for (std::size_t t = 0; t < 3; ++t) s.acc.n_gt[t] += w > kUpdateThresholds[t];
      }
    oracle.push_back(s);
  }
  std::ostringstream expect;
  write_layer_stats_csv(expect, oracle);
  CHECK(testing::slurp(dir / "out" / "lora_layers.csv") == expect.str());
  auto summary = nlohmann::json::parse(testing::slurp(dir / "out" / "lora_audit.json"));
  CHECK(summary["n_update_matrices"] == 21);
  CHECK(summary["hyperparameter_source"] == "alpha=flags,rank=flags");
  CHECK(std::filesystem::exists(dir / "out" / "lora_depth.svg"));

  auto no_alpha = memprobe_cli(dir, "lora-audit --base " + q(dir / "model" / "base.safetensors") + " --adapter " +
                                        q(dir / "model" / "adapter.safetensors") + " --out-dir " + q(dir / "out"));
  CHECK(no_alpha.code == 1);
  CHECK(no_alpha.err.find("LoRA alpha not given") != std::string::npos);
}
