#include "memprobe/config.hpp"

#include <cstdlib>
#include <fstream>
#include <initializer_list>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

namespace memprobe {
namespace {

using ojson = nlohmann::ordered_json;

void check_keys(const nlohmann::json& obj, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) throw ConfigError(fmt::format("config: '{}' must be an object", where));
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || a == key;
    if (!ok) throw ConfigError(fmt::format("config: unknown key '{}{}{}'", where, where.empty() ? "" : ".", key));
  }
}

template <typename T>
void take(const nlohmann::json& obj, const char* key, T& out, std::string_view where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(fmt::format("config: '{}{}{}' has the wrong type", where, where.empty() ? "" : ".", key));
  }
}

void take_path(const nlohmann::json& obj, const char* key, std::filesystem::path& out, std::string_view where) {
  std::string s = out.string();
  take(obj, key, s, where);
  out = s;
}

ojson to_json(const RunConfig& c) {
  ojson j;
  j["catalog"] = c.catalog.string();
  j["text_dir"] = c.text_dir.string();
  j["train_catalog"] = c.train_catalog.string();
  j["train_text_dir"] = c.train_text_dir.string();
  j["tokenizer"] = {{"kind", c.tokenizer.kind}, {"vocab", c.tokenizer.vocab.string()},
                    {"merges", c.tokenizer.merges.string()}};
  j["trim"] = {{"head_tokens", c.trim.head_tokens}, {"tail_tokens", c.trim.tail_tokens}};
  j["chunk"] = {{"prefix_len", c.chunk.prefix_len}, {"target_len", c.chunk.target_len}, {"stride", c.chunk.stride}};
  const auto& e = c.endpoint;
  ojson ep;
  ep["base_url"] = e.base_url;
  ep["model"] = e.model_name;
  ep["mode"] = to_string(e.mode);
  ep["max_new_tokens"] = e.max_new_tokens;
  ep["temperature"] = e.temperature;
  ep["system_prompt"] = e.system_prompt;
  ep["request_timeout_s"] = e.request_timeout_s;
  ep["max_in_flight"] = e.max_in_flight;
  ep["max_retries"] = e.max_retries;
  ep["retry_backoff_ms"] = e.retry_backoff.count();
  j["endpoint"] = ep;
  j["granularity"] = to_string(c.granularity);
  j["out_dir"] = c.out_dir.string();
  j["seed"] = c.seed;
  j["cutoff_date"] = format_iso_date(c.cutoff);
  j["threads"] = c.threads;
  return j;
}

}  // namespace

RunConfig parse_config(std::string_view json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config: not valid JSON");
  check_keys(j, "",
             {"catalog", "text_dir", "train_catalog", "train_text_dir", "tokenizer", "trim", "chunk", "endpoint",
              "granularity", "out_dir", "seed", "cutoff_date", "threads"});
  RunConfig c;
  take_path(j, "catalog", c.catalog, "");
  take_path(j, "text_dir", c.text_dir, "");
  take_path(j, "train_catalog", c.train_catalog, "");
  take_path(j, "train_text_dir", c.train_text_dir, "");
  take_path(j, "out_dir", c.out_dir, "");
  take(j, "seed", c.seed, "");
  take(j, "threads", c.threads, "");
  if (j.contains("tokenizer")) {
    const auto& t = j["tokenizer"];
    check_keys(t, "tokenizer", {"kind", "vocab", "merges"});
    take(t, "kind", c.tokenizer.kind, "tokenizer");
    take_path(t, "vocab", c.tokenizer.vocab, "tokenizer");
    take_path(t, "merges", c.tokenizer.merges, "tokenizer");
    if (c.tokenizer.kind != "whitespace" && c.tokenizer.kind != "bpe")
      throw ConfigError(fmt::format("config: tokenizer.kind '{}' is not whitespace|bpe", c.tokenizer.kind));
  }
  if (j.contains("trim")) {
    const auto& t = j["trim"];
    check_keys(t, "trim", {"head_tokens", "tail_tokens"});
    take(t, "head_tokens", c.trim.head_tokens, "trim");
    take(t, "tail_tokens", c.trim.tail_tokens, "trim");
  }
  if (j.contains("chunk")) {
    const auto& t = j["chunk"];
    check_keys(t, "chunk", {"prefix_len", "target_len", "stride"});
    take(t, "prefix_len", c.chunk.prefix_len, "chunk");
    take(t, "target_len", c.chunk.target_len, "chunk");
    take(t, "stride", c.chunk.stride, "chunk");
    try {
      c.chunk.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  c.endpoint.max_new_tokens = c.chunk.target_len;
  if (j.contains("endpoint")) {
    const auto& t = j["endpoint"];
    check_keys(t, "endpoint",
               {"base_url", "model", "mode", "max_new_tokens", "temperature", "system_prompt", "request_timeout_s",
                "max_in_flight", "max_retries", "retry_backoff_ms"});
    auto& e = c.endpoint;
    take(t, "base_url", e.base_url, "endpoint");
    take(t, "model", e.model_name, "endpoint");
    std::string mode(to_string(e.mode));
    take(t, "mode", mode, "endpoint");
    try {
      e.mode = parse_prompt_mode(mode);
    } catch (const std::exception& ex) {
      throw ConfigError(std::string("config: endpoint.mode: ") + ex.what());
    }
    take(t, "max_new_tokens", e.max_new_tokens, "endpoint");
    take(t, "temperature", e.temperature, "endpoint");
    if (t.contains("system_prompt")) {
      take(t, "system_prompt", e.system_prompt, "endpoint");
      c.system_prompt_is_default = e.system_prompt == kMemorySystemPrompt;
    }
    take(t, "request_timeout_s", e.request_timeout_s, "endpoint");
    take(t, "max_in_flight", e.max_in_flight, "endpoint");
    take(t, "max_retries", e.max_retries, "endpoint");
    std::int64_t backoff = e.retry_backoff.count();
    take(t, "retry_backoff_ms", backoff, "endpoint");
    e.retry_backoff = std::chrono::milliseconds(backoff);
    if (e.max_in_flight == 0) throw ConfigError("config: endpoint.max_in_flight must be at least 1");
  }
  if (j.contains("granularity")) {
    std::string g;
    take(j, "granularity", g, "");
    try {
      c.granularity = parse_granularity(g);
    } catch (const std::exception& ex) {
      throw ConfigError(std::string("config: ") + ex.what());
    }
  }
  if (j.contains("cutoff_date")) {
    std::string d;
    take(j, "cutoff_date", d, "");
    auto date = parse_iso_date(d);
    if (!date) throw ConfigError(fmt::format("config: cutoff_date '{}' is not YYYY-MM-DD", d));
    c.cutoff = *date;
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config(text);
}

std::string serialize_config(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

void apply_environment(RunConfig& cfg) {
  if (const char* url = std::getenv(kEndpointEnv); url && *url) cfg.endpoint.base_url = url;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 failed");
  std::string hex;
  hex.reserve(2 * len);
  for (unsigned int k = 0; k < len; ++k) hex += fmt::format("{:02x}", digest[k]);
  return hex;
}

std::string config_fingerprint(const RunConfig& cfg) {
  ojson j = to_json(cfg);
  for (const char* k : {"base_url", "request_timeout_s", "max_in_flight", "max_retries", "retry_backoff_ms"})
    j["endpoint"].erase(k);
  j.erase("out_dir");
  j.erase("threads");
  return sha256_hex(j.dump());
}

std::string endpoint_fingerprint(const EndpointConfig& ep) {
  ojson j;
  j["model"] = ep.model_name;
  j["mode"] = to_string(ep.mode);
  j["max_tokens"] = ep.requested_tokens();
  j["temperature"] = ep.temperature;
  if (ep.mode == PromptMode::chat) j["system_prompt"] = ep.system_prompt;
  return sha256_hex(j.dump());
}

std::filesystem::path meta_path(const std::filesystem::path& artifact) {
  auto p = artifact;
  p += ".meta.json";
  return p;
}

void write_meta(const std::filesystem::path& artifact, const ArtifactMeta& meta) {
  ojson j;
  j["stage"] = meta.stage;
  j["config_fingerprint"] = meta.config_fingerprint;
  if (!meta.endpoint_fingerprint.empty()) j["endpoint_fingerprint"] = meta.endpoint_fingerprint;
  if (!meta.granularity.empty()) j["granularity"] = meta.granularity;
  std::ofstream out(meta_path(artifact), std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + meta_path(artifact).string());
  out << j.dump(2) << '\n';
}

std::optional<ArtifactMeta> read_meta(const std::filesystem::path& artifact) {
  std::ifstream in(meta_path(artifact), std::ios::binary);
  if (!in) return std::nullopt;
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw std::runtime_error(meta_path(artifact).string() + ": not JSON");
  ArtifactMeta m;
  m.stage = j.value("stage", "");
  m.config_fingerprint = j.value("config_fingerprint", "");
  m.endpoint_fingerprint = j.value("endpoint_fingerprint", "");
  m.granularity = j.value("granularity", "");
  return m;
}

}  // namespace memprobe
