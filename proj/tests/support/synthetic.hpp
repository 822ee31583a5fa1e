#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "memprobe/corpus.hpp"

namespace memprobe::testing {

/// n words drawn uniformly from "w0".."w<vocab-1>", single-space separated.
std::string random_words(std::size_t n, std::uint64_t seed, std::size_t vocab = 4000);

/// n pairwise-distinct words "<tag>0".."<tag>n-1", single-space separated.
std::string distinct_words(std::size_t n, const std::string& tag = "u");

struct SyntheticBook {
  std::string book_id;
  std::string title;
  std::uint64_t ratings = 0;
  std::string added_date = "2001-01-01";
  std::string text;
};

/// Writes <dir>/catalog.csv and <dir>/texts/<id>.txt.
void write_corpus(const std::filesystem::path& dir, const std::vector<SyntheticBook>& books);

/// A usable book record whose trimmed text is `text` (no margins).
BookRecord trimmed_book(const std::string& id, const std::string& text);

/// Fresh directory removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

std::string slurp(const std::filesystem::path& p);

}  // namespace memprobe::testing

#include "memprobe/lora_audit.hpp"

namespace memprobe::testing {

/// One adapted projection of a synthetic decoder with its dense matrices.
struct SyntheticModule {
  LayerKey key;
  std::string base_name;     // model.layers.<i>.<block>.<m>_proj.weight
  std::string adapter_path;  // base_model.model.model.layers.<i>.<block>.<m>_proj
  Matrix base, A, B;
};

struct SyntheticLora {
  double alpha = 0;
  std::size_t rank = 0;
  std::vector<SyntheticModule> modules;  // layer-major, module order
};

/// Random base weights (a `zero_fraction` of them exactly zero) and random
/// LoRA factors for `blocks` layers of all seven projections.
SyntheticLora make_synthetic_lora(std::size_t blocks, std::size_t d_model, std::size_t d_ff, std::size_t rank,
                                  double alpha, std::uint64_t seed, double zero_fraction = 0.05);

/// Writes base.safetensors and adapter.safetensors (F64 unless told otherwise).
void write_synthetic_lora(const std::filesystem::path& dir, const SyntheticLora& lora, DType dtype = DType::F64);

}  // namespace memprobe::testing
