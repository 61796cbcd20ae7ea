#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "csrnet/tensor.hpp"

namespace csrnet {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written as raw little-endian host data");

namespace io {

inline constexpr std::array<char, 4> kTensorMagic{'C', 'S', 'R', 'T'};
inline constexpr std::uint16_t kTensorVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

template <typename V>
void write_pod(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

/// Sequential reader that reports byte offsets on truncation.
class BinaryReader {
 public:
  explicit BinaryReader(std::istream& is, std::string what = "stream")
      : is_(is), what_(std::move(what)) {}

  void read_bytes(void* dst, std::size_t count, const char* field) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(count));
    const auto got = static_cast<std::size_t>(is_.gcount());
    if (got != count) {
      throw FormatError(detail::concat(what_, ": truncated while reading ", field, " at byte offset ",
                                       offset_, ": expected ", count, " bytes, got ", got));
    }
    offset_ += count;
  }

  template <typename V>
  V read_pod(const char* field) {
    V v{};
    read_bytes(&v, sizeof(V), field);
    return v;
  }

  // True when no bytes remain.
  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

  std::uint64_t offset() const { return offset_; }
  const std::string& what() const { return what_; }

 private:
  std::istream& is_;
  std::string what_;
  std::uint64_t offset_ = 0;
};

/// Writes one CSRT record: magic, u16 version, u8 dtype, four u32 extents, raw data.
template <typename T>
void write_tensor(std::ostream& os, const Tensor4<T>& t) {
  os.write(kTensorMagic.data(), kTensorMagic.size());
  write_pod(os, kTensorVersion);
  write_pod(os, static_cast<std::uint8_t>(dtype_of<T>()));
  for (std::size_t e : {t.n(), t.c(), t.h(), t.w()}) write_pod(os, static_cast<std::uint32_t>(e));
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
}

/// Reads one CSRT record, converting the stored precision to T.
template <typename T>
Tensor4<T> read_tensor(BinaryReader& in) {
  const auto start = in.offset();
  std::array<char, 4> magic{};
  in.read_bytes(magic.data(), magic.size(), "tensor magic");
  if (magic != kTensorMagic) {
    throw FormatError(detail::concat(in.what(), ": bad tensor magic at byte offset ", start));
  }
  const auto version = in.read_pod<std::uint16_t>("tensor version");
  if (version != kTensorVersion) {
    throw FormatError(detail::concat(in.what(), ": unsupported tensor version ", version,
                                     " at byte offset ", start, " (expected ", kTensorVersion, ")"));
  }
  const auto tag = in.read_pod<std::uint8_t>("tensor dtype");
  if (tag > 1) {
    throw FormatError(detail::concat(in.what(), ": unknown dtype tag ", int(tag), " at byte offset ", start));
  }
  Shape4 shape;
  shape.n = in.read_pod<std::uint32_t>("extent n");
  shape.c = in.read_pod<std::uint32_t>("extent c");
  shape.h = in.read_pod<std::uint32_t>("extent h");
  shape.w = in.read_pod<std::uint32_t>("extent w");
  if (!shape.valid()) {
    throw FormatError(detail::concat(in.what(), ": zero extent ", shape.str(), " at byte offset ", start));
  }
  Tensor4<T> t(shape);
  if (static_cast<DType>(tag) == dtype_of<T>()) {
    in.read_bytes(t.data(), t.size() * sizeof(T), "tensor data");
  } else if (static_cast<DType>(tag) == DType::f32) {
    std::vector<float> raw(t.size());
    in.read_bytes(raw.data(), raw.size() * sizeof(float), "tensor data");
    std::copy(raw.begin(), raw.end(), t.data());
  } else {
    std::vector<double> raw(t.size());
    in.read_bytes(raw.data(), raw.size() * sizeof(double), "tensor data");
    std::transform(raw.begin(), raw.end(), t.data(), [](double v) { return static_cast<T>(v); });
  }
  return t;
}

}  // namespace io
}  // namespace csrnet
