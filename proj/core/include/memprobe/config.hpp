#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "memprobe/chunking.hpp"
#include "memprobe/corpus.hpp"
#include "memprobe/extraction.hpp"
#include "memprobe/metrics.hpp"
#include "memprobe/tokenization.hpp"

namespace memprobe {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a pipeline run depends on. Serialized as one JSON document;
/// every key is optional and unknown keys are rejected.
struct RunConfig {
  std::filesystem::path catalog;
  std::filesystem::path text_dir;
  std::filesystem::path train_catalog;
  std::filesystem::path train_text_dir;
  TokenizerSpec tokenizer;
  TrimMargins trim;
  ChunkSpec chunk;
  EndpointConfig endpoint;
  /// True until a config file or flag sets endpoint.system_prompt.
  bool system_prompt_is_default = true;
  Granularity granularity = Granularity::word;
  std::filesystem::path out_dir = "out";
  std::uint64_t seed = 0;
  Date cutoff = kDefaultCutoff;
  std::size_t threads = 0;  // 0: hardware concurrency
};

RunConfig parse_config(std::string_view json_text);
RunConfig load_config(const std::filesystem::path& path);
/// Canonical form: fixed key order, two-space indent.
std::string serialize_config(const RunConfig& cfg);

inline constexpr const char* kEndpointEnv = "MEMPROBE_ENDPOINT";
/// Applies MEMPROBE_ENDPOINT to endpoint.base_url when set and nonempty.
void apply_environment(RunConfig& cfg);

std::string sha256_hex(std::string_view bytes);

/// Hash of the canonical config with operational fields (endpoint URL,
/// timeouts, retry and concurrency limits, output directory, thread count)
/// blanked, so moving a run or its server does not change it.
std::string config_fingerprint(const RunConfig& cfg);
/// Hash of model name, prompt mode, decode parameters and (chat) system prompt.
std::string endpoint_fingerprint(const EndpointConfig& ep);

/// Sidecar `<artifact>.meta.json` written next to every artifact.
struct ArtifactMeta {
  std::string stage;
  std::string config_fingerprint;
  std::string endpoint_fingerprint;  // empty for stages before extraction
  std::string granularity;           // score-stage artifacts only
};

std::filesystem::path meta_path(const std::filesystem::path& artifact);
void write_meta(const std::filesystem::path& artifact, const ArtifactMeta& meta);
std::optional<ArtifactMeta> read_meta(const std::filesystem::path& artifact);

}  // namespace memprobe
