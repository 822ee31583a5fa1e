#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <regex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "memprobe/tensor_file.hpp"

namespace memprobe {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ModuleKind { attn_q, attn_k, attn_v, attn_o, mlp_gate, mlp_up, mlp_down };
inline constexpr std::size_t kModuleKinds = 7;

std::string_view to_string(ModuleKind m);
std::optional<ModuleKind> parse_module_kind(std::string_view s);
bool is_attention(ModuleKind m);

struct LayerKey {
  std::size_t layer = 0;
  ModuleKind module = ModuleKind::attn_q;

  auto operator<=>(const LayerKey&) const = default;
};

class AuditError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Maps tensor names to (layer, module). The default pattern matches
/// `layers.<i>.(self_attn|mlp).<proj>_proj` anywhere in the name.
class LayerNaming {
 public:
  LayerNaming();
  /// `module_names` maps the text captured by `module_group` to a kind.
  LayerNaming(const std::string& pattern, std::size_t layer_group, std::size_t module_group,
              std::vector<std::pair<std::string, ModuleKind>> module_names);

  /// JSON: {"pattern": str, "layer_group": int, "module_group": int,
  ///        "modules": {captured text: "attn_q" | ... | "mlp_down"}}.
  static LayerNaming from_file(const std::filesystem::path& path);

  std::optional<LayerKey> match(std::string_view tensor_name) const;
  const std::string& pattern() const { return pattern_; }

 private:
  std::string pattern_;
  std::regex regex_;
  std::size_t layer_group_ = 1;
  std::size_t module_group_ = 3;
  std::vector<std::pair<std::string, ModuleKind>> module_names_;
};

struct AdapterPair {
  std::string layer_path;
  LayerKey key;
  Matrix A;  // rank x d_in
  Matrix B;  // d_out x rank
  double alpha = 0.0;
  std::size_t rank = 0;

  std::size_t d_in() const { return static_cast<std::size_t>(A.cols()); }
  std::size_t d_out() const { return static_cast<std::size_t>(B.rows()); }
};

/// Groups `<path>.lora_A[.weight]` with `<path>.lora_B[.weight]`, sorted by
/// layer key. Orphans, rank/shape mismatches and unmappable paths throw.
std::vector<AdapterPair> pair_adapters(std::span<const TensorEntry> entries, double alpha, std::size_t rank,
                                       const LayerNaming& naming = {});

/// (alpha / rank) * B * A.
Matrix reconstruct_update(const AdapterPair& p);

/// |update / base| with base == 0 cells masked out.
struct RelativeUpdate {
  Matrix values;  // masked cells hold 0
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> masked;
  std::size_t n_zero_base = 0;

  std::vector<double> unmasked() const;
};

RelativeUpdate relative_update(const Matrix& update, const Matrix& base);

inline constexpr std::array<double, 3> kUpdateThresholds = {0.01, 0.1, 1.0};

/// 120 log10-spaced bins over [1e-8, 1e4); bin k is [10^(-8+k/10), 10^(-8+(k+1)/10)).
class LogHistogram {
 public:
  static constexpr std::size_t kBins = 120;
  static constexpr double kLogLo = -8.0;
  static constexpr double kLogHi = 4.0;

  static double edge(std::size_t k);
  /// Bin of v, or nullopt for underflow (v < 1e-8) and overflow (v >= 1e4).
  static std::optional<std::size_t> bin_of(double v);

  void add(double v);
  void merge(const LogHistogram& other);

  const std::array<std::uint64_t, kBins>& counts() const { return counts_; }
  std::uint64_t underflow() const { return underflow_; }
  std::uint64_t overflow() const { return overflow_; }
  std::uint64_t total() const;

 private:
  std::array<std::uint64_t, kBins> counts_{};
  std::uint64_t underflow_ = 0;
  std::uint64_t overflow_ = 0;
};

/// Exact threshold counts over unmasked W_rel values, kept beside the bins.
struct UpdateAccumulator {
  std::uint64_t n_weights = 0;
  std::uint64_t n_zero_base = 0;
  std::array<std::uint64_t, kUpdateThresholds.size()> n_gt{};
  LogHistogram histogram;

  void add_block(const RelativeUpdate& rel);
  void add_value(double v);
  void merge(const UpdateAccumulator& other);
  std::uint64_t n_unmasked() const { return n_weights - n_zero_base; }
  /// Fraction of unmasked values strictly above threshold i; 0 if none.
  double fraction(std::size_t i) const;
};

struct UpdateStats {
  LayerKey key;
  UpdateAccumulator acc;

  std::array<double, kUpdateThresholds.size()> fractions() const;
};

UpdateStats layer_stats(LayerKey key, const Matrix& update, const Matrix& base);

struct GlobalHistogram {
  LogHistogram histogram;
  std::uint64_t n_values = 0;
  std::array<std::uint64_t, kUpdateThresholds.size()> n_gt{};

  double fraction(std::size_t i) const;
};

/// Throws AuditError when there are no values.
GlobalHistogram global_histogram(std::span<const double> values);
GlobalHistogram global_histogram(std::span<const UpdateStats> stats);

struct DepthSeries {
  std::vector<double> all, attention, mlp;
  /// attention / mlp per layer; NaN where the MLP fraction is 0.
  std::vector<double> ratio;
};

struct DepthProfile {
  std::vector<std::size_t> layers;  // ascending
  std::array<DepthSeries, kUpdateThresholds.size()> by_threshold;
};

/// Per-layer fractions pooled over modules: count above threshold divided by
/// unmasked count, for all modules, attention only and MLP only.
DepthProfile depth_profile(std::span<const UpdateStats> stats);

struct AuditOptions {
  std::filesystem::path base;
  std::filesystem::path adapter;
  std::optional<double> alpha;      // overrides adapter_config.json
  std::optional<std::size_t> rank;  // overrides adapter_config.json
  LayerNaming naming;
  std::size_t threads = 1;
  std::size_t block_rows = 256;
};

struct AuditResult {
  double alpha = 0.0;
  std::size_t rank = 0;
  std::string hyper_source;  // "flags", "adapter_config.json" or a mix
  std::vector<UpdateStats> layers;  // sorted by key
  GlobalHistogram global;
  DepthProfile profile;
};

/// Streams the base tensors in row blocks, so peak memory stays near one
/// adapter plus one block of rows per worker.
AuditResult run_audit(const AuditOptions& opts);

inline constexpr std::string_view kLayerStatsHeader =
    "layer,module,n_weights,n_zero_base,frac_gt_0.01,frac_gt_0.1,frac_gt_1.0";
inline constexpr std::string_view kHistogramHeader = "bin_lo,bin_hi,count";

void write_layer_stats_csv(std::ostream& os, std::span<const UpdateStats> stats);
/// The 120 bins, preceded by an underflow row [0, 1e-8) and followed by an
/// overflow row [1e4, inf).
void write_histogram_csv(std::ostream& os, const LogHistogram& h);
void write_depth_profile_csv(std::ostream& os, const DepthProfile& p);

}  // namespace memprobe
