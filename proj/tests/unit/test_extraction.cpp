#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "memprobe/extraction.hpp"
#include "memprobe/metrics.hpp"
#include "memprobe/mock_server.hpp"
#include "synthetic.hpp"

using namespace memprobe;

namespace {

EndpointConfig quick_config(const MockServer& server, std::size_t in_flight = 1) {
  EndpointConfig cfg;
  cfg.base_url = server.base_url();
  cfg.model_name = "mock-model";
  cfg.max_in_flight = in_flight;
  cfg.retry_backoff = std::chrono::milliseconds(1);
  cfg.request_timeout_s = 10;
  return cfg;
}

struct Fixture {
  WhitespaceTokenizer tok;
  std::vector<BookRecord> books;
  std::vector<Chunk> chunks;

  explicit Fixture(std::size_t words = 650) {
    for (int k = 0; k < 3; ++k) {
      books.push_back(testing::trimmed_book("book" + std::to_string(k), testing::random_words(words, 100 + k)));
      auto c = make_chunks(books.back(), tok, {});
      chunks.insert(chunks.end(), c.begin(), c.end());
    }
  }
  std::vector<std::string> texts() const {
    std::vector<std::string> out;
    for (const auto& b : books) out.push_back(b.trimmed_text);
    return out;
  }
};

}  // namespace

TEST_CASE("request bodies follow the completions wire shape") {
  EndpointConfig cfg;
  cfg.model_name = "m";
  auto raw = nlohmann::json::parse(build_request_body(cfg, "Once upon"));
  CHECK(raw == nlohmann::json{{"model", "m"}, {"prompt", "Once upon"}, {"max_tokens", 38}, {"temperature", 0.0}});
  CHECK(request_path(PromptMode::raw) == "/v1/completions");

  cfg.mode = PromptMode::chat;
  auto chat = nlohmann::json::parse(build_request_body(cfg, "Once upon"));
  REQUIRE(chat["messages"].size() == 2);
  CHECK(chat["messages"][0]["role"] == "system");
  CHECK(chat["messages"][0]["content"] == std::string(kMemorySystemPrompt));
  CHECK(chat["messages"][1] == nlohmann::json{{"role", "user"}, {"content", "Once upon"}});
  CHECK_FALSE(chat.contains("prompt"));
  CHECK(request_path(PromptMode::chat) == "/v1/chat/completions");
}

TEST_CASE("response parsing") {
  CHECK(parse_completion(PromptMode::raw, R"({"choices":[{"text":" the end"}]})") == " the end");
  CHECK(parse_completion(PromptMode::chat, R"({"choices":[{"message":{"role":"assistant","content":"x"}}]})") ==
        "x");
  CHECK_THROWS_WITH_AS(parse_completion(PromptMode::raw, "<html>"), "malformed response body: not JSON",
                       EndpointError);
  CHECK_THROWS_WITH_AS(parse_completion(PromptMode::raw, R"({"choices":[]})"),
                       "malformed response body: no choices[0]", EndpointError);
  CHECK_THROWS_AS(parse_completion(PromptMode::chat, R"({"choices":[{"text":"x"}]})"), EndpointError);
}

TEST_CASE("truth continuation and mock behavior specs") {
  std::vector<std::string> texts = {"a b c d e f", "x y z"};
  CHECK(truth_continuation(texts, "b c", 2) == " d e");
  CHECK(truth_continuation(texts, "a b c d e f", 5) == "");
  CHECK(truth_continuation(texts, "x y", 9) == " z");
  CHECK(truth_continuation(texts, "b c d e f", 2) == "");
  CHECK(truth_continuation(texts, "q", 2) == std::nullopt);
  CHECK(parse_mock_behavior("fixed:zzz zzz").fixed_text == "zzz zzz");
  CHECK(parse_mock_behavior("noise:0.25").noise_p == 0.25);
  CHECK_THROWS(parse_mock_behavior("noise:2"));
  CHECK_THROWS(parse_mock_behavior("parrot"));
}

TEST_CASE("echo-truth extraction reproduces every target") {
  Fixture fx;
  MockServer server({}, fx.texts());
  auto recs = run_piecewise(quick_config(server, 4), fx.chunks, fx.tok);
  REQUIRE(recs.size() == fx.chunks.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(recs[i].book_id == fx.chunks[i].book_id);
    CHECK(recs[i].chunk_index == fx.chunks[i].index);
    CHECK(recs[i].generated_text == fx.chunks[i].target_text);
    CHECK(recs[i].max_tokens == 38);
  }
  CHECK(server.requests().size() == fx.chunks.size());
}

TEST_CASE("fixed-junk extraction scores near zero") {
  Fixture fx;
  MockBehavior b;
  b.kind = MockKind::fixed_string;
  MockServer server(b, {});
  auto recs = run_piecewise(quick_config(server), fx.chunks, fx.tok);
  for (const auto& r : recs) CHECK(r.generated_text == "zzz");
}

TEST_CASE("transient failures are retried up to the limit, then name the chunk") {
  Fixture fx;
  MockBehavior b;
  b.fail_first = 3;
  MockServer server(b, fx.texts());
  auto cfg = quick_config(server);
  cfg.max_retries = 2;
  std::vector<Chunk> one(fx.chunks.begin(), fx.chunks.begin() + 1);
  try {
    run_piecewise(cfg, one, fx.tok);
    FAIL("expected an ExtractionError");
  } catch (const ExtractionError& e) {
    CHECK(e.chunk() == "book0#0");
    CHECK(std::string(e.what()).find("HTTP 500") != std::string::npos);
  }
  CHECK(server.requests().size() == 3);

  server.set_behavior(b);
  cfg.max_retries = 3;
  auto recs = run_piecewise(cfg, one, fx.tok);
  CHECK(recs[0].generated_text == one[0].target_text);
}

TEST_CASE("a rerun with a manifest resumes after the last completed chunk") {
  Fixture fx;
  testing::TempDir dir;
  MockBehavior b;
  b.fail_after = 2;
  MockServer server(b, fx.texts());
  auto cfg = quick_config(server);
  cfg.max_retries = 0;
  PiecewiseOptions opts{dir / "manifest.jsonl"};
  CHECK_THROWS_AS(run_piecewise(cfg, fx.chunks, fx.tok, opts), ExtractionError);
  {
    std::ifstream in(dir / "manifest.jsonl");
    CHECK(read_generations_jsonl(in, fx.tok).size() == 2);
  }

  server.set_behavior({});
  server.clear_log();
  auto recs = run_piecewise(cfg, fx.chunks, fx.tok, opts);
  REQUIRE(recs.size() == fx.chunks.size());
  CHECK(server.requests().size() == fx.chunks.size() - 2);
  for (const auto& req : server.requests()) {
    auto prompt = nlohmann::json::parse(req.body)["prompt"].get<std::string>();
    CHECK(prompt != fx.chunks[0].prefix_text);
    CHECK(prompt != fx.chunks[1].prefix_text);
  }
  for (std::size_t i = 0; i < recs.size(); ++i) CHECK(recs[i].generated_text == fx.chunks[i].target_text);
}

TEST_CASE("concurrent extraction is ordered and deterministic") {
  Fixture fx;
  MockBehavior b;
  b.kind = MockKind::truth_with_noise;
  b.noise_p = 0.3;
  MockServer server(b, fx.texts());
  auto first = run_piecewise(quick_config(server, 8), fx.chunks, fx.tok);
  auto second = run_piecewise(quick_config(server, 3), fx.chunks, fx.tok);
  REQUIRE(first.size() == second.size());
  for (std::size_t i = 0; i < first.size(); ++i) {
    CHECK(first[i].generated_text == second[i].generated_text);
    CHECK(first[i].chunk_index == fx.chunks[i].index);
  }
}

TEST_CASE("chat mode sends the system prompt and scores like raw") {
  Fixture fx;
  MockServer server({}, fx.texts());
  auto cfg = quick_config(server);
  cfg.mode = PromptMode::chat;
  std::vector<Chunk> two(fx.chunks.begin(), fx.chunks.begin() + 2);
  auto recs = run_piecewise(cfg, two, fx.tok);
  CHECK(recs[1].generated_text == two[1].target_text);
  CHECK(recs[1].prompt_mode == PromptMode::chat);
  auto reqs = server.requests();
  CHECK(reqs[0].path == "/v1/chat/completions");
}

TEST_CASE("noise mock matches the binomial expectation of Jaccard") {
  // k of n distinct words survive with probability 1-p; junk words are
  // fresh, so J = k / (2n - k).
  const std::size_t n = 30;
  const double p = 0.2;
  double expected = 0.0;
  for (std::size_t k = 0; k <= n; ++k) {
    const double pmf = std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) +
                                k * std::log(1 - p) + (n - k) * std::log(p));
    expected += pmf * static_cast<double>(k) / static_cast<double>(2 * n - k);
  }
  const Units truth = to_units(testing::distinct_words(n), Granularity::word);
  const int trials = 4000;
  double sum = 0, sum_sq = 0;
  for (int t = 0; t < trials; ++t) {
    const double j = jaccard(to_units(add_noise(testing::distinct_words(n), p, t), Granularity::word), truth);
    sum += j;
    sum_sq += j * j;
  }
  const double mean = sum / trials;
  const double se = std::sqrt((sum_sq / trials - mean * mean) / trials);
  CHECK(std::abs(mean - expected) < 4 * se);
  CHECK(add_noise("a b c", 0.0, 1) == "a b c");
  CHECK(add_noise("a b c", 0.5, 9) == add_noise("a b c", 0.5, 9));
}

TEST_CASE("autoregressive echo reproduces the ground-truth continuation") {
  WhitespaceTokenizer tok;
  auto book = testing::trimmed_book("ar", testing::random_words(2000, 42));
  MockServer server({}, {book.trimmed_text});
  ChunkSpec spec;
  auto res = run_autoregressive(quick_config(server), book, tok, spec, 1000);
  CHECK_FALSE(res.record.truncated);
  CHECK(res.record.steps == 50);
  CHECK(res.record.generated_text == autoregressive_reference(book, tok, spec));
  CHECK(server.requests().size() == 50);

  auto none = run_autoregressive(quick_config(server), book, tok, spec, 0);
  CHECK(none.record.generated_text.empty());
  CHECK(none.record.steps == 0);
}

TEST_CASE("autoregressive context slides over the model's own output") {
  WhitespaceTokenizer tok;
  auto book = testing::trimmed_book("ar", testing::distinct_words(800, "s"));
  ChunkSpec spec{20, 5, 5};
  const std::vector<std::string> truth_words = to_units(book.trimmed_text, Granularity::word);

  // Step 3 emits junk; other steps echo the book after the context's last
  // word when it is a book word, else a marker naming the step.
  auto respond = [&](std::string_view prompt, std::size_t step) -> std::string {
    if (step == 3) return "j0 j1 j2 j3 j4 extra";
    auto words = to_units(prompt, Granularity::word);
    auto it = std::find(truth_words.begin(), truth_words.end(), words.back());
    std::string out;
    for (std::size_t k = 0; k < 5; ++k) {
      out += (k ? " " : "");
      if (it != truth_words.end() && it + 1 + static_cast<std::ptrdiff_t>(k) < truth_words.end())
        out += *(it + 1 + static_cast<std::ptrdiff_t>(k));
      else
        out += "m" + std::to_string(step) + "_" + std::to_string(k);
    }
    return out;
  };
  std::vector<std::string> prompts;
  auto generate = [&](std::string_view prompt) {
    prompts.emplace_back(prompt);
    return respond(prompt, prompts.size() - 1);
  };
  auto res = run_autoregressive(generate, book, tok, spec, 8);

  // Independent simulation of the window recurrence.
  std::vector<std::string> seq(truth_words.begin(), truth_words.begin() + 20);
  std::vector<std::string> transcript;
  std::vector<std::string> sim_prompts;
  for (std::size_t step = 0; step < 8; ++step) {
    std::vector<std::string> window(seq.end() - 20, seq.end());
    std::string prompt;
    for (const auto& w : window) prompt += (prompt.empty() ? "" : " ") + w;
    sim_prompts.push_back(prompt);
    auto out = to_units(respond(prompt, step), Granularity::word);
    out.resize(std::min<std::size_t>(out.size(), 5));
    seq.insert(seq.end(), out.begin(), out.end());
    transcript.insert(transcript.end(), out.begin(), out.end());
  }
  CHECK(prompts == sim_prompts);
  CHECK(to_units(res.record.generated_text, Granularity::word) == transcript);
  CHECK(res.record.steps == 8);
  CHECK(transcript[15] == "j0");
  CHECK(transcript[20].starts_with("m4_"));
}

TEST_CASE("autoregressive runs stop early on errors and keep what they have") {
  WhitespaceTokenizer tok;
  auto book = testing::trimmed_book("ar", testing::random_words(700, 5));
  ChunkSpec spec;
  int calls = 0;
  auto res = run_autoregressive(
      [&](std::string_view) -> std::string {
        if (++calls == 3) throw std::runtime_error("boom");
        return "a b c";
      },
      book, tok, spec, 10);
  CHECK(res.record.truncated);
  CHECK(res.error == "step 2: boom");
  CHECK(res.record.generated_text == "a b c a b c");
  CHECK_THROWS_AS(run_autoregressive([](std::string_view) { return std::string(); },
                                     testing::trimmed_book("tiny", "a b"), tok, spec, 1),
                  std::invalid_argument);
}

TEST_CASE("binding a taken port fails with a clear error") {
  MockServer first({}, {});
  CHECK_THROWS_WITH_AS(MockServer({}, {}, first.port()), ("port in use: " + std::to_string(first.port())).c_str(),
                       MockServerError);
}

TEST_CASE("generation records round-trip through jsonl") {
  WhitespaceTokenizer tok;
  GenerationRecord r;
  r.book_id = "b";
  r.chunk_index = 7;
  r.mode = GenerationMode::autoregressive;
  r.prompt_mode = PromptMode::chat;
  r.generated_text = "one \"two\" three";
  r.model_name = "m";
  r.max_tokens = 38;
  r.steps = 4;
  r.truncated = true;
  r.timestamp = utc_timestamp();
  std::stringstream ss;
  write_generation_jsonl(ss, r);
  auto back = read_generations_jsonl(ss, tok);
  REQUIRE(back.size() == 1);
  CHECK(back[0].generated_text == r.generated_text);
  CHECK(back[0].mode == GenerationMode::autoregressive);
  CHECK(back[0].prompt_mode == PromptMode::chat);
  CHECK(back[0].steps == 4);
  CHECK(back[0].truncated);
  CHECK(back[0].generated_ids.size() == 3);
  CHECK(r.timestamp.size() == 20);
}
