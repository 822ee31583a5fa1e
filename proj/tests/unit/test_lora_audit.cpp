#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <Eigen/SVD>

#include "memprobe/lora_audit.hpp"
#include "synthetic.hpp"

using namespace memprobe;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    Eigen::Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

TensorEntry entry(const std::string& name, const Matrix& m) {
  TensorEntry e{name, DType::F64, {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, {}};
  e.data.assign(m.data(), m.data() + m.size());
  return e;
}

std::vector<TensorEntry> adapter_entries(const testing::SyntheticLora& lora) {
  std::vector<TensorEntry> out;
  for (const auto& m : lora.modules) {
    out.push_back(entry(m.adapter_path + ".lora_B.weight", m.B));
    out.push_back(entry(m.adapter_path + ".lora_A.weight", m.A));
  }
  return out;
}

// Triple loop, no Eigen products.
Matrix naive_update(const Matrix& A, const Matrix& B, double alpha, std::size_t r) {
  Matrix out = Matrix::Zero(B.rows(), A.cols());
  for (Eigen::Index i = 0; i < B.rows(); ++i)
    for (Eigen::Index j = 0; j < A.cols(); ++j) {
      double s = 0;
      for (Eigen::Index k = 0; k < A.rows(); ++k) s += B(i, k) * A(k, j);
      out(i, j) = alpha / static_cast<double>(r) * s;
    }
  return out;
}

}  // namespace

TEST_CASE("reconstruct a hand-computed update") {
  AdapterPair p;
  p.A = mat({{1, 2}});
  p.B = mat({{3}, {4}});
  p.alpha = 2;
  p.rank = 1;
  CHECK(reconstruct_update(p) == mat({{6, 12}, {8, 16}}));

  auto rel = relative_update(mat({{6, 12}, {8, 16}}), mat({{3, 6}, {2, 0}}));
  CHECK(rel.n_zero_base == 1);
  CHECK(rel.masked(1, 1));
  CHECK(rel.unmasked() == std::vector<double>{2, 2, 4});
  CHECK(rel.values(1, 1) == 0.0);
  CHECK(relative_update(mat({{-1}}), mat({{-4}})).values(0, 0) == 0.25);
  CHECK_THROWS_AS(relative_update(mat({{1, 2}}), mat({{1}})), AuditError);
}

TEST_CASE("default naming maps common decoder paths") {
  LayerNaming naming;
  auto k = naming.match("base_model.model.model.layers.17.mlp.down_proj");
  REQUIRE(k);
  CHECK(k->layer == 17);
  CHECK(k->module == ModuleKind::mlp_down);
  CHECK(naming.match("model.layers.3.self_attn.o_proj.weight")->module == ModuleKind::attn_o);
  CHECK_FALSE(naming.match("model.embed_tokens.weight"));
  CHECK_FALSE(naming.match("layers.1.self_attn.rotary_proj"));
  CHECK_THROWS_AS(LayerNaming("(unclosed", 1, 1, {}), AuditError);
  CHECK_THROWS_AS(LayerNaming("x(\\d+)", 1, 2, {}), AuditError);
}

TEST_CASE("custom naming from a JSON file") {
  testing::TempDir dir;
  std::ofstream(dir / "naming.json")
      << R"J({"pattern":"h\\.(\\d+)\\.(attn\\.c_attn|attn\\.c_proj|mlp\\.c_fc|mlp\\.c_proj)",)J"
         R"("layer_group":1,"module_group":2,)"
         R"("modules":{"attn.c_attn":"attn_q","attn.c_proj":"attn_o","mlp.c_fc":"mlp_up","mlp.c_proj":"mlp_down"}})";
  auto naming = LayerNaming::from_file(dir / "naming.json");
  auto k = naming.match("transformer.h.4.mlp.c_fc");
  REQUIRE(k);
  CHECK(k->layer == 4);
  CHECK(k->module == ModuleKind::mlp_up);
  std::ofstream(dir / "bad.json") << R"J({"pattern":"(\\d+)","modules":{"x":"attn_z"}})J";
  CHECK_THROWS_AS(LayerNaming::from_file(dir / "bad.json"), AuditError);
}

TEST_CASE("pairing a two-block adapter") {
  auto lora = testing::make_synthetic_lora(2, 8, 12, 4, 8.0, 1);
  auto entries = adapter_entries(lora);
  auto pairs = pair_adapters(entries, 8.0, 4);
  REQUIRE(pairs.size() == 14);
  for (std::size_t k = 1; k < pairs.size(); ++k) CHECK(pairs[k - 1].key < pairs[k].key);
  CHECK(pairs[0].key == LayerKey{0, ModuleKind::attn_q});
  CHECK(pairs[6].key == LayerKey{0, ModuleKind::mlp_down});
  CHECK(pairs[6].d_in() == 12);
  CHECK(pairs[6].d_out() == 8);

  auto orphan = entries;
  orphan.erase(orphan.begin() + 1);  // drop layer 0 q lora_A
  CHECK_THROWS_WITH_AS(pair_adapters(orphan, 8.0, 4),
                       "orphan lora_B without lora_A at 'base_model.model.model.layers.0.self_attn.q_proj'",
                       AuditError);
  CHECK_THROWS_WITH_AS(pair_adapters(entries, 8.0, 8),
                       doctest::Contains("rank mismatch at 'base_model.model.model.layers.0.mlp.down_proj'"),
                       AuditError);
  auto unmapped = entries;
  unmapped.push_back(entry("lm_head.lora_A.weight", mat({{1}})));
  unmapped.push_back(entry("lm_head.lora_B.weight", mat({{1}})));
  CHECK_THROWS_WITH_AS(pair_adapters(unmapped, 8.0, 4), "cannot map 'lm_head' to a layer and module", AuditError);
}

TEST_CASE("wide adapter shapes pair by rank") {
  std::vector<TensorEntry> e = {
      entry("layers.0.mlp.down_proj.lora_A.weight", Matrix::Zero(16, 8192)),
      entry("layers.0.mlp.down_proj.lora_B.weight", Matrix::Zero(1024, 16)),
  };
  auto pairs = pair_adapters(e, 32, 16);
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].d_in() == 8192);
  CHECK(pairs[0].d_out() == 1024);
  e[1] = entry("layers.0.mlp.down_proj.lora_B.weight", Matrix::Zero(1024, 15));
  CHECK_THROWS_WITH_AS(pair_adapters(e, 32, 16), doctest::Contains("shape mismatch at"), AuditError);
}

TEST_CASE("histogram bins") {
  CHECK(LogHistogram::edge(0) == doctest::Approx(1e-8));
  CHECK(LogHistogram::edge(80) == doctest::Approx(1.0));
  CHECK(LogHistogram::edge(120) == doctest::Approx(1e4));
  CHECK(LogHistogram::bin_of(1e-9) == std::nullopt);
  CHECK(LogHistogram::bin_of(1e4) == std::nullopt);
  CHECK(LogHistogram::bin_of(LogHistogram::edge(0)) == 0u);
  CHECK(LogHistogram::bin_of(0.5) == 76u);
  for (std::size_t k = 0; k < LogHistogram::kBins; ++k) {
    CHECK(LogHistogram::bin_of(LogHistogram::edge(k)) == k);
    CHECK(LogHistogram::bin_of(std::nextafter(LogHistogram::edge(k + 1), 0.0)) == k);
  }

  LogHistogram h;
  for (int i = 0; i < 10; ++i) h.add(0.5);
  CHECK(h.counts()[76] == 10);
  CHECK(h.total() == 10);
  h.add(0.0);
  h.add(1e5);
  CHECK(h.underflow() == 1);
  CHECK(h.overflow() == 1);
}

TEST_CASE("log-uniform values land in the bins a linear edge scan assigns") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-10, 6);
  std::vector<double> values;
  for (int i = 0; i < 20000; ++i) values.push_back(std::pow(10.0, u(rng)));
  auto g = global_histogram(values);
  std::array<std::uint64_t, LogHistogram::kBins> expect{};
  std::uint64_t under = 0, over = 0;
  std::array<std::uint64_t, 3> gt{};
  for (double v : values) {
    if (v < std::pow(10.0, -8.0)) ++under;
    else if (v >= std::pow(10.0, 4.0)) ++over;
    else {
      std::size_t k = 0;
      while (k + 1 < LogHistogram::kBins && v >= std::pow(10.0, -8.0 + static_cast<double>(k + 1) / 10.0)) ++k;
      ++expect[k];
    }
    for (std::size_t t = 0; t < 3; ++t) gt[t] += v > kUpdateThresholds[t];
  }
  CHECK(g.histogram.counts() == expect);
  CHECK(g.histogram.underflow() == under);
  CHECK(g.histogram.overflow() == over);
  CHECK(g.n_gt == gt);
  CHECK(g.n_values == values.size());
  CHECK_THROWS_AS(global_histogram(std::span<const double>()), AuditError);
}

TEST_CASE("depth profile pools modules per layer") {
  std::vector<UpdateStats> stats;
  auto add = [&](std::size_t layer, ModuleKind m, int high, int low) {
    UpdateStats s;
    s.key = {layer, m};
    for (int i = 0; i < high; ++i) s.acc.add_value(0.5);
    for (int i = 0; i < low; ++i) s.acc.add_value(0.001);
    stats.push_back(s);
  };
  for (auto m : {ModuleKind::attn_q, ModuleKind::attn_k, ModuleKind::attn_v, ModuleKind::attn_o}) {
    add(0, m, 7, 3);
    add(1, m, 0, 10);
  }
  for (auto m : {ModuleKind::mlp_gate, ModuleKind::mlp_up, ModuleKind::mlp_down}) {
    add(0, m, 1, 9);
    add(1, m, 0, 10);
  }
  auto p = depth_profile(stats);
  CHECK(p.layers == std::vector<std::size_t>{0, 1});
  const auto& s = p.by_threshold[1];  // > 0.1
  CHECK(s.attention[0] == doctest::Approx(0.7));
  CHECK(s.mlp[0] == doctest::Approx(0.1));
  CHECK(s.ratio[0] == doctest::Approx(7.0));
  CHECK(s.all[0] == doctest::Approx(31.0 / 70.0));
  CHECK(s.all[1] == 0.0);
  CHECK(std::isnan(s.ratio[1]));
  CHECK(p.by_threshold[2].all[0] == 0.0);  // nothing exceeds 1.0
  CHECK(p.by_threshold[0].all[0] == doctest::Approx(31.0 / 70.0));
}

TEST_CASE("reconstruction, tail counts and masking on random adapters") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> alpha_dist(1, 64);
  for (std::size_t r : {1u, 4u, 16u}) {
    const double alpha = alpha_dist(rng);
    auto lora = testing::make_synthetic_lora(3, 24, 40, r, alpha, 100 + r, 0.1);
    auto pairs = pair_adapters(adapter_entries(lora), alpha, r);
    REQUIRE(pairs.size() == 21);
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const auto& mod = lora.modules[k];
      REQUIRE(pairs[k].key == mod.key);
      Matrix upd = reconstruct_update(pairs[k]);
      Matrix direct = naive_update(mod.A, mod.B, alpha, r);
      CHECK((upd - direct).cwiseAbs().maxCoeff() <= 1e-12);

      auto stats = layer_stats(mod.key, upd, mod.base);
      std::uint64_t zero = 0;
      std::array<std::uint64_t, 3> gt{};
      for (Eigen::Index i = 0; i < upd.rows(); ++i)
        for (Eigen::Index j = 0; j < upd.cols(); ++j) {
          if (mod.base(i, j) == 0.0) {
            ++zero;
            continue;
          }
          const double w = std::abs(upd(i, j) / mod.base(i, j));
          for (std::size_t t = 0; t < 3; ++t) gt[t] += w > kUpdateThresholds[t];
        }
      CHECK(stats.acc.n_zero_base == zero);
      CHECK(stats.acc.n_gt == gt);
      CHECK(stats.acc.n_weights == static_cast<std::uint64_t>(upd.size()));
      CHECK(stats.acc.n_unmasked() + stats.acc.n_zero_base == stats.acc.n_weights);
      CHECK(stats.acc.histogram.total() == stats.acc.n_unmasked());
    }
  }
}

TEST_CASE("update rank never exceeds the adapter rank and scales linearly") {
  auto lora = testing::make_synthetic_lora(1, 48, 64, 4, 16.0, 77);
  auto pairs = pair_adapters(adapter_entries(lora), 16.0, 4);
  for (const auto& p : pairs) {
    Matrix u = reconstruct_update(p);
    Eigen::JacobiSVD<Matrix> svd(u);
    const auto& sv = svd.singularValues();
    CHECK(sv(3) > 1e-6 * sv(0));
    for (Eigen::Index k = 4; k < sv.size(); ++k) CHECK(sv(k) <= 1e-10 * sv(0));

    AdapterPair doubled = p;
    doubled.alpha *= 2;
    CHECK((reconstruct_update(doubled) - 2 * u).cwiseAbs().maxCoeff() <= 1e-12);
    AdapterPair summed = p;
    summed.B = p.B + p.B;
    CHECK((reconstruct_update(summed) - 2 * u).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("streaming audit over files matches in-memory statistics") {
  testing::TempDir dir;
  auto lora = testing::make_synthetic_lora(3, 20, 36, 4, 32.0, 5);
  testing::write_synthetic_lora(dir.path(), lora);
  std::ofstream(dir / "adapter_config.json") << R"({"lora_alpha": 32, "r": 4, "target_modules": ["q_proj"]})";

  AuditOptions opts;
  opts.base = dir / "base.safetensors";
  opts.adapter = dir / "adapter.safetensors";
  opts.threads = 3;
  opts.block_rows = 7;
  auto res = run_audit(opts);
  CHECK(res.alpha == 32.0);
  CHECK(res.rank == 4);
  CHECK(res.hyper_source == "alpha=adapter_config.json,rank=adapter_config.json");
  REQUIRE(res.layers.size() == 21);
  std::uint64_t total = 0;
  for (std::size_t k = 0; k < res.layers.size(); ++k) {
    const auto& mod = lora.modules[k];
    auto direct = layer_stats(mod.key, naive_update(mod.A, mod.B, 32.0, 4), mod.base);
    CHECK(res.layers[k].key == mod.key);
    CHECK(res.layers[k].acc.n_gt == direct.acc.n_gt);
    CHECK(res.layers[k].acc.n_zero_base == direct.acc.n_zero_base);
    CHECK(res.layers[k].acc.histogram.counts() == direct.acc.histogram.counts());
    total += direct.acc.n_unmasked();
  }
  CHECK(res.global.n_values == total);
  CHECK(res.profile.layers == std::vector<std::size_t>{0, 1, 2});

  opts.alpha = 64.0;
  auto flagged = run_audit(opts);
  CHECK(flagged.hyper_source == "alpha=flags,rank=adapter_config.json");
  CHECK(flagged.layers[0].acc.n_gt[0] >= res.layers[0].acc.n_gt[0]);

  std::filesystem::remove(dir / "adapter_config.json");
  opts.alpha.reset();
  CHECK_THROWS_WITH_AS(run_audit(opts), "LoRA alpha not given: pass --alpha or provide adapter_config.json",
                       AuditError);
}

TEST_CASE("audit with a custom naming scheme") {
  testing::TempDir dir;
  Matrix base = mat({{1, 2}, {0, 4}});
  std::vector<TensorEntry> b = {entry("blocks.2.ffn.w_out", base)};
  std::vector<TensorEntry> a = {entry("blocks.2.ffn.w_out.lora_A", mat({{1, 1}})),
                                entry("blocks.2.ffn.w_out.lora_B", mat({{0.5}, {1}}))};
  write_tensor_file(dir / "base.safetensors", b);
  write_tensor_file(dir / "adapter.safetensors", a);
  std::ofstream(dir / "naming.json")
      << R"J({"pattern":"blocks\\.(\\d+)\\.ffn\\.(w_out)","modules":{"w_out":"mlp_down"}})J";
  AuditOptions opts;
  opts.base = dir / "base.safetensors";
  opts.adapter = dir / "adapter.safetensors";
  opts.alpha = 1.0;
  opts.rank = 1;
  opts.naming = LayerNaming::from_file(dir / "naming.json");
  auto res = run_audit(opts);
  REQUIRE(res.layers.size() == 1);
  // update [[.5,.5],[1,1]] over base [[1,2],[0,4]]: W_rel {0.5, 0.25, masked, 0.25}
  CHECK(res.layers[0].key == LayerKey{2, ModuleKind::mlp_down});
  CHECK(res.layers[0].acc.n_zero_base == 1);
  CHECK(res.layers[0].acc.n_gt == std::array<std::uint64_t, 3>{3, 3, 0});
  CHECK(res.hyper_source == "alpha=flags,rank=flags");
}

TEST_CASE("csv outputs") {
  UpdateStats s;
  s.key = {3, ModuleKind::attn_v};
  for (double v : {0.005, 0.05, 0.5, 5.0}) s.acc.add_value(v);
  std::ostringstream os;
  write_layer_stats_csv(os, std::span(&s, 1));
  CHECK(os.str() == "layer,module,n_weights,n_zero_base,frac_gt_0.01,frac_gt_0.1,frac_gt_1.0\n"
                    "3,attn_v,4,0,0.75,0.5,0.25\n");

  std::ostringstream hs;
  write_histogram_csv(hs, s.acc.histogram);
  std::vector<std::string> lines;
  std::istringstream in(hs.str());
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  REQUIRE(lines.size() == 1 + 1 + 120 + 1);
  CHECK(lines[0] == "bin_lo,bin_hi,count");
  CHECK(lines[1] == "0,1e-08,0");
  CHECK(lines.back() == "10000,inf,0");
}
