#include "memprobe/lora_audit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <ostream>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>

#include "memprobe/parallel.hpp"

namespace memprobe {
namespace {

constexpr std::array<std::pair<std::string_view, ModuleKind>, kModuleKinds> kModuleNames = {{
    {"attn_q", ModuleKind::attn_q},
    {"attn_k", ModuleKind::attn_k},
    {"attn_v", ModuleKind::attn_v},
    {"attn_o", ModuleKind::attn_o},
    {"mlp_gate", ModuleKind::mlp_gate},
    {"mlp_up", ModuleKind::mlp_up},
    {"mlp_down", ModuleKind::mlp_down},
}};

Matrix to_matrix(const TensorEntry& e) {
  if (e.shape.size() != 2) throw AuditError(fmt::format("tensor '{}' is not 2-D", e.name));
  Matrix m(static_cast<Eigen::Index>(e.shape[0]), static_cast<Eigen::Index>(e.shape[1]));
  std::copy(e.data.begin(), e.data.end(), m.data());
  return m;
}

std::string strip_suffix(std::string_view s, std::string_view suffix) {
  return std::string(s.ends_with(suffix) ? s.substr(0, s.size() - suffix.size()) : s);
}

struct AdapterName {
  std::string path;
  bool is_a = false;
};

std::optional<AdapterName> split_adapter_name(std::string_view name) {
  std::string stem = strip_suffix(name, ".weight");
  for (auto [suffix, is_a] : {std::pair{std::string_view(".lora_A"), true}, {".lora_B", false}}) {
    if (stem.ends_with(suffix)) return AdapterName{stem.substr(0, stem.size() - suffix.size()), is_a};
  }
  return std::nullopt;
}

}  // namespace

std::string_view to_string(ModuleKind m) { return kModuleNames[static_cast<std::size_t>(m)].first; }

std::optional<ModuleKind> parse_module_kind(std::string_view s) {
  for (auto [name, kind] : kModuleNames)
    if (name == s) return kind;
  return std::nullopt;
}

bool is_attention(ModuleKind m) {
  return m == ModuleKind::attn_q || m == ModuleKind::attn_k || m == ModuleKind::attn_v || m == ModuleKind::attn_o;
}

LayerNaming::LayerNaming()
    : LayerNaming(R"(layers\.(\d+)\.(self_attn|mlp)\.(q|k|v|o|gate|up|down)_proj)", 1, 3,
                  {{"q", ModuleKind::attn_q},
                   {"k", ModuleKind::attn_k},
                   {"v", ModuleKind::attn_v},
                   {"o", ModuleKind::attn_o},
                   {"gate", ModuleKind::mlp_gate},
                   {"up", ModuleKind::mlp_up},
                   {"down", ModuleKind::mlp_down}}) {}

LayerNaming::LayerNaming(const std::string& pattern, std::size_t layer_group, std::size_t module_group,
                         std::vector<std::pair<std::string, ModuleKind>> module_names)
    : pattern_(pattern), layer_group_(layer_group), module_group_(module_group),
      module_names_(std::move(module_names)) {
  try {
    regex_ = std::regex(pattern_, std::regex::ECMAScript);
  } catch (const std::regex_error& e) {
    throw AuditError(fmt::format("invalid layer-name pattern '{}': {}", pattern_, e.what()));
  }
  if (layer_group_ == 0 || module_group_ == 0 || layer_group_ > regex_.mark_count() ||
      module_group_ > regex_.mark_count())
    throw AuditError(fmt::format("pattern '{}' has {} groups; layer_group and module_group must name one",
                                 pattern_, regex_.mark_count()));
}

LayerNaming LayerNaming::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw AuditError("cannot open layer-naming file " + path.string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw AuditError(path.string() + ": not a JSON object");
  try {
    std::vector<std::pair<std::string, ModuleKind>> modules;
    for (const auto& [text, kind] : j.at("modules").items()) {
      auto k = parse_module_kind(kind.get<std::string>());
      if (!k) throw AuditError(fmt::format("{}: unknown module kind '{}'", path.string(), kind.get<std::string>()));
      modules.emplace_back(text, *k);
    }
    return LayerNaming(j.at("pattern").get<std::string>(), j.value("layer_group", std::size_t{1}),
                       j.value("module_group", std::size_t{2}), std::move(modules));
  } catch (const nlohmann::json::exception& e) {
    throw AuditError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::optional<LayerKey> LayerNaming::match(std::string_view tensor_name) const {
  std::match_results<std::string_view::const_iterator> m;
  if (!std::regex_search(tensor_name.begin(), tensor_name.end(), m, regex_)) return std::nullopt;
  const std::string module_text = m[static_cast<int>(module_group_)].str();
  for (const auto& [text, kind] : module_names_) {
    if (text == module_text) {
      LayerKey key;
      key.layer = std::stoull(m[static_cast<int>(layer_group_)].str());
      key.module = kind;
      return key;
    }
  }
  return std::nullopt;
}

std::vector<AdapterPair> pair_adapters(std::span<const TensorEntry> entries, double alpha, std::size_t rank,
                                       const LayerNaming& naming) {
  if (rank == 0) throw AuditError("LoRA rank must be at least 1");
  std::map<std::string, std::pair<const TensorEntry*, const TensorEntry*>> by_path;
  for (const auto& e : entries) {
    auto n = split_adapter_name(e.name);
    if (!n) continue;
    auto& slot = by_path[n->path];
    (n->is_a ? slot.first : slot.second) = &e;
  }
  std::vector<AdapterPair> out;
  for (const auto& [path, ab] : by_path) {
    if (!ab.first) throw AuditError(fmt::format("orphan lora_B without lora_A at '{}'", path));
    if (!ab.second) throw AuditError(fmt::format("orphan lora_A without lora_B at '{}'", path));
    auto key = naming.match(path);
    if (!key) throw AuditError(fmt::format("cannot map '{}' to a layer and module", path));
    AdapterPair p;
    p.layer_path = path;
    p.key = *key;
    p.A = to_matrix(*ab.first);
    p.B = to_matrix(*ab.second);
    p.alpha = alpha;
    p.rank = rank;
    if (p.A.rows() != p.B.cols())
      throw AuditError(fmt::format("shape mismatch at '{}': lora_A has {} rows, lora_B has {} columns", path,
                                   p.A.rows(), p.B.cols()));
    if (static_cast<std::size_t>(p.A.rows()) != rank)
      throw AuditError(fmt::format("rank mismatch at '{}': adapter rank {}, configured {}", path, p.A.rows(), rank));
    out.push_back(std::move(p));
  }
  std::sort(out.begin(), out.end(), [](const AdapterPair& a, const AdapterPair& b) { return a.key < b.key; });
  for (std::size_t k = 1; k < out.size(); ++k)
    if (out[k].key == out[k - 1].key)
      throw AuditError(fmt::format("'{}' and '{}' map to the same layer and module", out[k - 1].layer_path,
                                   out[k].layer_path));
  return out;
}

Matrix reconstruct_update(const AdapterPair& p) {
  return (p.alpha / static_cast<double>(p.rank)) * (p.B * p.A);
}

std::vector<double> RelativeUpdate::unmasked() const {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(values.size()) - n_zero_base);
  for (Eigen::Index k = 0; k < values.size(); ++k)
    if (!masked.data()[k]) out.push_back(values.data()[k]);
  return out;
}

RelativeUpdate relative_update(const Matrix& update, const Matrix& base) {
  if (update.rows() != base.rows() || update.cols() != base.cols())
    throw AuditError(fmt::format("update is {}x{} but base weight is {}x{}", update.rows(), update.cols(),
                                 base.rows(), base.cols()));
  RelativeUpdate r;
  r.values.resize(update.rows(), update.cols());
  r.masked.resize(update.rows(), update.cols());
  for (Eigen::Index k = 0; k < update.size(); ++k) {
    const double w = base.data()[k];
    const bool zero = w == 0.0;
    r.masked.data()[k] = zero;
    r.values.data()[k] = zero ? 0.0 : std::fabs(update.data()[k] / w);
    r.n_zero_base += zero;
  }
  return r;
}

double LogHistogram::edge(std::size_t k) { return std::pow(10.0, kLogLo + static_cast<double>(k) / 10.0); }

std::optional<std::size_t> LogHistogram::bin_of(double v) {
  if (!(v >= edge(0))) return std::nullopt;
  if (v >= edge(kBins)) return std::nullopt;
  auto k = static_cast<std::size_t>(std::clamp((std::log10(v) - kLogLo) * 10.0, 0.0, double(kBins - 1)));
  // log10 can land one bin off near an edge; settle against the edges.
  while (k > 0 && v < edge(k)) --k;
  while (k + 1 < kBins && v >= edge(k + 1)) ++k;
  return k;
}

void LogHistogram::add(double v) {
  if (auto k = bin_of(v)) ++counts_[*k];
  else if (v >= edge(kBins)) ++overflow_;
  else ++underflow_;
}

void LogHistogram::merge(const LogHistogram& other) {
  for (std::size_t k = 0; k < kBins; ++k) counts_[k] += other.counts_[k];
  underflow_ += other.underflow_;
  overflow_ += other.overflow_;
}

std::uint64_t LogHistogram::total() const {
  std::uint64_t n = underflow_ + overflow_;
  for (auto c : counts_) n += c;
  return n;
}

void UpdateAccumulator::add_value(double v) {
  ++n_weights;
  for (std::size_t i = 0; i < kUpdateThresholds.size(); ++i) n_gt[i] += v > kUpdateThresholds[i];
  histogram.add(v);
}

void UpdateAccumulator::add_block(const RelativeUpdate& rel) {
  for (Eigen::Index k = 0; k < rel.values.size(); ++k) {
    if (rel.masked.data()[k]) {
      ++n_weights;
      ++n_zero_base;
    } else {
      add_value(rel.values.data()[k]);
    }
  }
}

void UpdateAccumulator::merge(const UpdateAccumulator& other) {
  n_weights += other.n_weights;
  n_zero_base += other.n_zero_base;
  for (std::size_t i = 0; i < n_gt.size(); ++i) n_gt[i] += other.n_gt[i];
  histogram.merge(other.histogram);
}

double UpdateAccumulator::fraction(std::size_t i) const {
  const auto n = n_unmasked();
  return n == 0 ? 0.0 : static_cast<double>(n_gt[i]) / static_cast<double>(n);
}

std::array<double, kUpdateThresholds.size()> UpdateStats::fractions() const {
  std::array<double, kUpdateThresholds.size()> f{};
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = acc.fraction(i);
  return f;
}

UpdateStats layer_stats(LayerKey key, const Matrix& update, const Matrix& base) {
  UpdateStats s;
  s.key = key;
  s.acc.add_block(relative_update(update, base));
  return s;
}

double GlobalHistogram::fraction(std::size_t i) const {
  return n_values == 0 ? 0.0 : static_cast<double>(n_gt[i]) / static_cast<double>(n_values);
}

GlobalHistogram global_histogram(std::span<const double> values) {
  if (values.empty()) throw AuditError("no unmasked relative-update values: every base weight is zero");
  GlobalHistogram g;
  for (double v : values) {
    g.histogram.add(v);
    for (std::size_t i = 0; i < kUpdateThresholds.size(); ++i) g.n_gt[i] += v > kUpdateThresholds[i];
  }
  g.n_values = values.size();
  return g;
}

GlobalHistogram global_histogram(std::span<const UpdateStats> stats) {
  GlobalHistogram g;
  for (const auto& s : stats) {
    g.histogram.merge(s.acc.histogram);
    g.n_values += s.acc.n_unmasked();
    for (std::size_t i = 0; i < kUpdateThresholds.size(); ++i) g.n_gt[i] += s.acc.n_gt[i];
  }
  if (g.n_values == 0) throw AuditError("no unmasked relative-update values: every base weight is zero");
  return g;
}

DepthProfile depth_profile(std::span<const UpdateStats> stats) {
  struct Pool {
    std::uint64_t n = 0;
    std::array<std::uint64_t, kUpdateThresholds.size()> gt{};
    void add(const UpdateAccumulator& a) {
      n += a.n_unmasked();
      for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += a.n_gt[i];
    }
    double frac(std::size_t i) const { return n == 0 ? 0.0 : static_cast<double>(gt[i]) / static_cast<double>(n); }
  };
  std::map<std::size_t, std::array<Pool, 3>> per_layer;  // all, attention, mlp
  for (const auto& s : stats) {
    auto& pools = per_layer[s.key.layer];
    pools[0].add(s.acc);
    pools[is_attention(s.key.module) ? 1 : 2].add(s.acc);
  }
  DepthProfile p;
  for (const auto& [layer, pools] : per_layer) {
    p.layers.push_back(layer);
    for (std::size_t i = 0; i < kUpdateThresholds.size(); ++i) {
      auto& series = p.by_threshold[i];
      series.all.push_back(pools[0].frac(i));
      series.attention.push_back(pools[1].frac(i));
      series.mlp.push_back(pools[2].frac(i));
      const double mlp = pools[2].frac(i);
      series.ratio.push_back(mlp == 0.0 ? std::numeric_limits<double>::quiet_NaN() : pools[1].frac(i) / mlp);
    }
  }
  return p;
}

namespace {

struct Hyper {
  double alpha;
  std::size_t rank;
  std::string source;
};

Hyper resolve_hyper(const AuditOptions& opts) {
  std::optional<double> cfg_alpha;
  std::optional<std::size_t> cfg_rank;
  const auto sidecar = opts.adapter.parent_path() / "adapter_config.json";
  if (std::filesystem::exists(sidecar)) {
    std::ifstream in(sidecar);
    auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw AuditError(sidecar.string() + ": not a JSON object");
    if (j.contains("lora_alpha") && j["lora_alpha"].is_number()) cfg_alpha = j["lora_alpha"].get<double>();
    if (j.contains("r") && j["r"].is_number_unsigned()) cfg_rank = j["r"].get<std::size_t>();
  }
  Hyper h{};
  auto pick = [](auto flag, auto cfg, const char* what, std::string& src) {
    if (flag) {
      src += std::string(src.empty() ? "" : ",") + what + "=flags";
      return *flag;
    }
    if (cfg) {
      src += std::string(src.empty() ? "" : ",") + what + "=adapter_config.json";
      return *cfg;
    }
    throw AuditError(fmt::format("LoRA {} not given: pass --{} or provide adapter_config.json", what, what));
  };
  h.alpha = pick(opts.alpha, cfg_alpha, "alpha", h.source);
  h.rank = pick(opts.rank, cfg_rank, "rank", h.source);
  return h;
}

}  // namespace

AuditResult run_audit(const AuditOptions& opts) {
  AuditResult result;
  const Hyper hyper = resolve_hyper(opts);
  result.alpha = hyper.alpha;
  result.rank = hyper.rank;
  result.hyper_source = hyper.source;

  const auto adapter_entries = read_tensor_file(opts.adapter);
  const auto pairs = pair_adapters(adapter_entries, hyper.alpha, hyper.rank, opts.naming);
  if (pairs.empty()) throw AuditError("adapter file contains no lora_A/lora_B pairs");

  const TensorFile base = TensorFile::open(opts.base);
  std::map<LayerKey, const TensorInfo*> base_by_key;
  for (const auto& t : base.tensors()) {
    if (split_adapter_name(t.name)) continue;
    if (auto key = opts.naming.match(t.name)) {
      auto [it, fresh] = base_by_key.emplace(*key, &t);
      if (!fresh) throw AuditError(fmt::format("base tensors '{}' and '{}' map to the same layer and module",
                                               it->second->name, t.name));
    }
  }

  result.layers.resize(pairs.size());
  const std::size_t block = std::max<std::size_t>(1, opts.block_rows);
  parallel_for(pairs.size(), opts.threads, [&](std::size_t k) {
    const AdapterPair& p = pairs[k];
    auto it = base_by_key.find(p.key);
    if (it == base_by_key.end())
      throw AuditError(fmt::format("no base weight for adapter '{}'", p.layer_path));
    const TensorInfo& info = *it->second;
    if (info.shape.size() != 2 || info.shape[0] != p.d_out() || info.shape[1] != p.d_in())
      throw AuditError(fmt::format("adapter '{}' implies a {}x{} update but base '{}' is {}", p.layer_path,
                                   p.d_out(), p.d_in(), info.name, fmt::join(info.shape, "x")));
    const double scale = p.alpha / static_cast<double>(p.rank);
    UpdateStats& s = result.layers[k];
    s.key = p.key;
    for (std::size_t r0 = 0; r0 < p.d_out(); r0 += block) {
      const std::size_t r1 = std::min(p.d_out(), r0 + block);
      const auto rows = static_cast<Eigen::Index>(r1 - r0);
      auto raw = base.read_rows(info.name, r0, r1);
      Matrix base_rows = Eigen::Map<Matrix>(raw.data(), rows, static_cast<Eigen::Index>(p.d_in()));
      Matrix update_rows = scale * (p.B.middleRows(static_cast<Eigen::Index>(r0), rows) * p.A);
      s.acc.add_block(relative_update(update_rows, base_rows));
    }
  });

  result.global = global_histogram(std::span<const UpdateStats>(result.layers));
  result.profile = depth_profile(result.layers);
  return result;
}

void write_layer_stats_csv(std::ostream& os, std::span<const UpdateStats> stats) {
  os << kLayerStatsHeader << '\n';
  for (const auto& s : stats) {
    auto f = s.fractions();
    os << fmt::format("{},{},{},{},{},{},{}\n", s.key.layer, to_string(s.key.module), s.acc.n_weights,
                      s.acc.n_zero_base, f[0], f[1], f[2]);
  }
}

void write_histogram_csv(std::ostream& os, const LogHistogram& h) {
  os << kHistogramHeader << '\n';
  os << fmt::format("0,{},{}\n", LogHistogram::edge(0), h.underflow());
  for (std::size_t k = 0; k < LogHistogram::kBins; ++k)
    os << fmt::format("{},{},{}\n", LogHistogram::edge(k), LogHistogram::edge(k + 1), h.counts()[k]);
  os << fmt::format("{},inf,{}\n", LogHistogram::edge(LogHistogram::kBins), h.overflow());
}

void write_depth_profile_csv(std::ostream& os, const DepthProfile& p) {
  os << "layer";
  for (double t : kUpdateThresholds) os << fmt::format(",all_gt_{0},attn_gt_{0},mlp_gt_{0},attn_mlp_ratio_gt_{0}", t);
  os << '\n';
  for (std::size_t k = 0; k < p.layers.size(); ++k) {
    os << p.layers[k];
    for (const auto& s : p.by_threshold) os << fmt::format(",{},{},{},{}", s.all[k], s.attention[k], s.mlp[k], s.ratio[k]);
    os << '\n';
  }
}

}  // namespace memprobe
