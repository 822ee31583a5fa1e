#include "memprobe/tensor_file.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace memprobe {
namespace {

static_assert(std::endian::native == std::endian::little, "tensor files are little-endian");

std::uint64_t load_u64(const char* p) {
  std::uint64_t v = 0;
  std::memcpy(&v, p, sizeof v);
  return v;
}

double widen(DType d, const char* p) {
  switch (d) {
    case DType::F64: {
      double v;
      std::memcpy(&v, p, 8);
      return v;
    }
    case DType::F32: {
      float v;
      std::memcpy(&v, p, 4);
      return v;
    }
    case DType::F16: {
      std::uint16_t b;
      std::memcpy(&b, p, 2);
      return half_to_double(b);
    }
    case DType::BF16: {
      std::uint16_t b;
      std::memcpy(&b, p, 2);
      return bf16_to_double(b);
    }
  }
  return 0.0;
}

void narrow(DType d, double v, std::string& out) {
  char buf[8];
  switch (d) {
    case DType::F64:
      std::memcpy(buf, &v, 8);
      out.append(buf, 8);
      break;
    case DType::F32: {
      float f = static_cast<float>(v);
      std::memcpy(buf, &f, 4);
      out.append(buf, 4);
      break;
    }
    case DType::F16: {
      std::uint16_t b = double_to_half(v);
      std::memcpy(buf, &b, 2);
      out.append(buf, 2);
      break;
    }
    case DType::BF16: {
      std::uint16_t b = double_to_bf16(v);
      std::memcpy(buf, &b, 2);
      out.append(buf, 2);
      break;
    }
  }
}

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

}  // namespace

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::F64: return 8;
    case DType::F32: return 4;
    case DType::F16:
    case DType::BF16: return 2;
  }
  return 0;
}

std::string_view to_string(DType d) {
  switch (d) {
    case DType::F64: return "F64";
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
  }
  return "?";
}

std::optional<DType> parse_dtype(std::string_view s) {
  if (s == "F64") return DType::F64;
  if (s == "F32") return DType::F32;
  if (s == "F16") return DType::F16;
  if (s == "BF16") return DType::BF16;
  return std::nullopt;
}

double bf16_to_double(std::uint16_t bits) {
  return static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16));
}

double half_to_double(std::uint16_t bits) {
  const int sign = (bits >> 15) & 1;
  const int exp = (bits >> 10) & 0x1F;
  const int mant = bits & 0x3FF;
  double v;
  if (exp == 0) v = std::ldexp(static_cast<double>(mant), -24);
  else if (exp == 31) v = mant ? std::numeric_limits<double>::quiet_NaN() : std::numeric_limits<double>::infinity();
  else v = std::ldexp(static_cast<double>(mant | 0x400), exp - 25);
  return sign ? -v : v;
}

std::uint16_t double_to_bf16(double v) {
  std::uint32_t f = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  if ((f & 0x7F800000u) == 0x7F800000u && (f & 0x7FFFFFu)) return static_cast<std::uint16_t>((f >> 16) | 0x40);
  const std::uint32_t rounding = 0x7FFFu + ((f >> 16) & 1u);
  return static_cast<std::uint16_t>((f + rounding) >> 16);
}

std::uint16_t double_to_half(double v) {
  const std::uint16_t sign = std::signbit(v) ? 0x8000 : 0;
  double a = std::fabs(v);
  if (std::isnan(v)) return 0x7E00;
  if (a >= 65520.0) return sign | 0x7C00;
  if (a < std::ldexp(1.0, -14)) {
    // Subnormal: units of 2^-24, nearest-even via rint.
    auto m = static_cast<std::uint16_t>(std::nearbyint(std::ldexp(a, 24)));
    return sign | m;
  }
  int e = 0;
  double frac = std::frexp(a, &e);  // a = frac * 2^e, frac in [0.5, 1)
  double scaled = std::ldexp(frac, 11);  // [1024, 2048)
  auto m = static_cast<std::uint32_t>(std::nearbyint(scaled));
  int exp = e - 1 + 15;
  if (m == 2048) {
    m = 1024;
    ++exp;
  }
  if (exp >= 31) return sign | 0x7C00;
  return static_cast<std::uint16_t>(sign | (exp << 10) | (m & 0x3FF));
}

TensorFormatError::TensorFormatError(std::size_t position, const std::string& what)
    : std::runtime_error(fmt::format("byte {}: {}", position, what)), position_(position) {}

std::size_t TensorInfo::numel() const { return product(shape); }
std::size_t TensorEntry::numel() const { return product(shape); }

void TensorFile::parse(std::string_view head, std::size_t file_size) {
  if (file_size < 8) throw TensorFormatError(0, "truncated: missing 8-byte header length");
  const std::uint64_t n = load_u64(head.data());
  if (n > file_size - 8)
    throw TensorFormatError(0, fmt::format("header length {} exceeds file size {}", n, file_size));
  const std::string_view header = head.substr(8, n);
  data_start_ = 8 + n;
  const std::size_t data_size = file_size - data_start_;

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(header);
  } catch (const nlohmann::json::parse_error& e) {
    throw TensorFormatError(8 + (e.byte > 0 ? e.byte - 1 : 0), std::string("header is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw TensorFormatError(8, "header is not a JSON object");

  auto where = [&](const std::string& key) {
    auto at = header.find("\"" + key + "\"");
    return 8 + (at == std::string_view::npos ? 0 : at);
  };

  tensors_.clear();
  metadata_.clear();
  for (const auto& [name, v] : j.items()) {
    if (name == "__metadata__") {
      if (!v.is_object()) throw TensorFormatError(where(name), "__metadata__ must be an object");
      for (const auto& [k, s] : v.items()) {
        if (!s.is_string()) throw TensorFormatError(where(k), "__metadata__ values must be strings");
        metadata_[k] = s.get<std::string>();
      }
      continue;
    }
    const std::size_t pos = where(name);
    if (!v.is_object()) throw TensorFormatError(pos, fmt::format("tensor '{}' entry is not an object", name));
    TensorInfo info;
    info.name = name;
    if (!v.contains("dtype") || !v["dtype"].is_string())
      throw TensorFormatError(pos, fmt::format("tensor '{}' lacks a dtype", name));
    auto dt = parse_dtype(v["dtype"].get<std::string>());
    if (!dt)
      throw TensorFormatError(pos, fmt::format("tensor '{}' has unknown dtype '{}'", name, v["dtype"].get<std::string>()));
    info.dtype = *dt;
    if (!v.contains("shape") || !v["shape"].is_array())
      throw TensorFormatError(pos, fmt::format("tensor '{}' lacks a shape", name));
    for (const auto& d : v["shape"]) {
      if (!d.is_number_unsigned()) throw TensorFormatError(pos, fmt::format("tensor '{}' has a bad shape", name));
      info.shape.push_back(d.get<std::size_t>());
    }
    const auto& off = v.value("data_offsets", nlohmann::json());
    if (!off.is_array() || off.size() != 2 || !off[0].is_number_unsigned() || !off[1].is_number_unsigned())
      throw TensorFormatError(pos, fmt::format("tensor '{}' needs data_offsets [begin, end]", name));
    info.begin = off[0].get<std::size_t>();
    info.end = off[1].get<std::size_t>();
    if (info.begin > info.end)
      throw TensorFormatError(pos, fmt::format("tensor '{}' has non-monotone offsets [{}, {}]", name, info.begin,
                                               info.end));
    if (info.end > data_size)
      throw TensorFormatError(data_start_ + std::min(info.end, data_size),
                              fmt::format("truncated: tensor '{}' ends at data byte {} but only {} exist", name,
                                          info.end, data_size));
    if (info.numel() * dtype_size(info.dtype) != info.end - info.begin)
      throw TensorFormatError(pos, fmt::format("tensor '{}': shape needs {} bytes, offsets span {}", name,
                                               info.numel() * dtype_size(info.dtype), info.end - info.begin));
    tensors_.push_back(std::move(info));
  }

  std::sort(tensors_.begin(), tensors_.end(),
            [](const TensorInfo& a, const TensorInfo& b) { return std::tie(a.begin, a.end) < std::tie(b.begin, b.end); });
  std::size_t cursor = 0;
  for (const auto& t : tensors_) {
    if (t.begin < cursor)
      throw TensorFormatError(data_start_ + t.begin, fmt::format("tensor '{}' overlaps the previous tensor", t.name));
    if (t.begin > cursor)
      throw TensorFormatError(data_start_ + cursor, fmt::format("gap in data section before tensor '{}'", t.name));
    cursor = t.end;
  }
  if (cursor != data_size)
    throw TensorFormatError(data_start_ + cursor, fmt::format("{} trailing bytes after last tensor", data_size - cursor));
}

TensorFile TensorFile::open(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open tensor file " + path.string());
  const auto size = static_cast<std::size_t>(std::filesystem::file_size(path));
  TensorFile f;
  f.path_ = path;
  std::string head(std::min<std::size_t>(size, 8), '\0');
  in.read(head.data(), static_cast<std::streamsize>(head.size()));
  if (size >= 8) {
    const std::uint64_t n = load_u64(head.data());
    if (n <= size - 8) {
      head.resize(8 + n);
      in.read(head.data() + 8, static_cast<std::streamsize>(n));
    }
  }
  f.parse(head, size);
  return f;
}

TensorFile TensorFile::from_bytes(std::string bytes) {
  TensorFile f;
  f.image_ = std::move(bytes);
  f.parse(*f.image_, f.image_->size());
  return f;
}

const TensorInfo* TensorFile::find(std::string_view name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return &t;
  return nullptr;
}

std::string TensorFile::read_bytes(std::size_t offset, std::size_t size) const {
  if (image_) return image_->substr(data_start_ + offset, size);
  std::ifstream in(path_, std::ios::binary);
  if (!in) throw std::runtime_error("cannot reopen tensor file " + path_.string());
  in.seekg(static_cast<std::streamoff>(data_start_ + offset));
  std::string buf(size, '\0');
  in.read(buf.data(), static_cast<std::streamsize>(size));
  if (static_cast<std::size_t>(in.gcount()) != size)
    throw TensorFormatError(data_start_ + offset, "short read");
  return buf;
}

TensorEntry TensorFile::read(std::string_view name) const {
  const TensorInfo* info = find(name);
  if (!info) throw std::out_of_range(fmt::format("no tensor named '{}'", name));
  std::string raw = read_bytes(info->begin, info->end - info->begin);
  TensorEntry e;
  e.name = info->name;
  e.dtype = info->dtype;
  e.shape = info->shape;
  const std::size_t w = dtype_size(info->dtype);
  e.data.resize(info->numel());
  for (std::size_t k = 0; k < e.data.size(); ++k) e.data[k] = widen(info->dtype, raw.data() + k * w);
  return e;
}

std::vector<double> TensorFile::read_rows(std::string_view name, std::size_t row_begin, std::size_t row_end) const {
  const TensorInfo* info = find(name);
  if (!info) throw std::out_of_range(fmt::format("no tensor named '{}'", name));
  if (info->shape.size() != 2) throw std::invalid_argument(fmt::format("tensor '{}' is not 2-D", name));
  if (row_begin > row_end || row_end > info->shape[0])
    throw std::out_of_range(fmt::format("rows [{}, {}) outside tensor '{}'", row_begin, row_end, name));
  const std::size_t w = dtype_size(info->dtype);
  const std::size_t cols = info->shape[1];
  std::string raw = read_bytes(info->begin + row_begin * cols * w, (row_end - row_begin) * cols * w);
  std::vector<double> out((row_end - row_begin) * cols);
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = widen(info->dtype, raw.data() + k * w);
  return out;
}

std::vector<TensorEntry> read_tensor_file(const std::filesystem::path& path) {
  TensorFile f = TensorFile::open(path);
  std::vector<TensorEntry> out;
  for (const auto& t : f.tensors()) out.push_back(f.read(t.name));
  return out;
}

std::string serialize_tensors(std::span<const TensorEntry> entries, const std::map<std::string, std::string>& metadata) {
  nlohmann::ordered_json header = nlohmann::ordered_json::object();
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::string data;
  for (const auto& e : entries) {
    if (e.data.size() != e.numel())
      throw std::invalid_argument(fmt::format("tensor '{}' has {} values for shape of {}", e.name, e.data.size(), e.numel()));
    const std::size_t begin = data.size();
    for (double v : e.data) narrow(e.dtype, v, data);
    header[e.name] = {{"dtype", to_string(e.dtype)}, {"shape", e.shape}, {"data_offsets", {begin, data.size()}}};
  }
  std::string h = header.dump();
  while (h.size() % 8 != 0) h += ' ';
  std::string out(8, '\0');
  const std::uint64_t n = h.size();
  std::memcpy(out.data(), &n, 8);
  out += h;
  out += data;
  return out;
}

void write_tensor_file(const std::filesystem::path& path, std::span<const TensorEntry> entries,
                       const std::map<std::string, std::string>& metadata) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  std::string bytes = serialize_tensors(entries, metadata);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace memprobe
