#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace memprobe {

enum class DType { F64, F32, F16, BF16 };

std::size_t dtype_size(DType d);
std::string_view to_string(DType d);
std::optional<DType> parse_dtype(std::string_view s);

double half_to_double(std::uint16_t bits);
double bf16_to_double(std::uint16_t bits);
/// Round-to-nearest-even narrowing.
std::uint16_t double_to_half(double v);
std::uint16_t double_to_bf16(double v);

/// Malformed container; position() is the absolute byte offset at fault.
class TensorFormatError : public std::runtime_error {
 public:
  TensorFormatError(std::size_t position, const std::string& what);
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

struct TensorInfo {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::size_t> shape;
  std::size_t begin = 0;  // relative to the data section
  std::size_t end = 0;

  std::size_t numel() const;
};

/// A tensor widened to double, row-major.
struct TensorEntry {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::size_t> shape;
  std::vector<double> data;

  std::size_t numel() const;
};

/// Safetensors container: u64 LE header length N, N bytes of JSON header,
/// then the data section. Tensors are read on demand.
class TensorFile {
 public:
  static TensorFile open(const std::filesystem::path& path);
  /// Parses an in-memory image (kept by the returned object).
  static TensorFile from_bytes(std::string bytes);

  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }
  const TensorInfo* find(std::string_view name) const;

  TensorEntry read(std::string_view name) const;
  /// Rows [row_begin, row_end) of a 2-D tensor, row-major.
  std::vector<double> read_rows(std::string_view name, std::size_t row_begin, std::size_t row_end) const;

 private:
  void parse(std::string_view head, std::size_t file_size);
  std::string read_bytes(std::size_t offset, std::size_t size) const;

  std::filesystem::path path_;
  std::optional<std::string> image_;
  std::size_t data_start_ = 0;
  std::vector<TensorInfo> tensors_;
  std::map<std::string, std::string> metadata_;
};

/// Eager read of every tensor, in data-offset order.
std::vector<TensorEntry> read_tensor_file(const std::filesystem::path& path);

/// Encodes entries (narrowing to their dtype) into a container image.
std::string serialize_tensors(std::span<const TensorEntry> entries,
                              const std::map<std::string, std::string>& metadata = {});
void write_tensor_file(const std::filesystem::path& path, std::span<const TensorEntry> entries,
                       const std::map<std::string, std::string>& metadata = {});

}  // namespace memprobe
