#pragma once

// Little-endian encoding independent of host byte order.

#include <bit>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "emoanti/errors.hpp"

namespace emoanti::detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void i64(std::int64_t v) { le(static_cast<std::uint64_t>(v), 8); }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v), 4); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string what) : data_(data), what_(std::move(what)) {}

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

  void need(std::size_t n, const char* field) const {
    if (n > remaining()) {
      throw TruncatedError(what_ + ": truncated while reading " + field + " (need " + std::to_string(n) +
                           " bytes at offset " + std::to_string(pos_) + ", " + std::to_string(remaining()) +
                           " available)");
    }
  }
  std::span<const std::uint8_t> bytes(std::size_t n, const char* field) {
    need(n, field);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const char* f) { return static_cast<std::uint8_t>(le(1, f)); }
  std::uint16_t u16(const char* f) { return static_cast<std::uint16_t>(le(2, f)); }
  std::uint32_t u32(const char* f) { return static_cast<std::uint32_t>(le(4, f)); }
  std::uint64_t u64(const char* f) { return le(8, f); }
  std::int64_t i64(const char* f) { return static_cast<std::int64_t>(le(8, f)); }
  float f32(const char* f) { return std::bit_cast<float>(static_cast<std::uint32_t>(le(4, f))); }
  double f64(const char* f) { return std::bit_cast<double>(le(8, f)); }
  std::string str(const char* f) {
    const std::uint32_t n = u32(f);
    auto b = bytes(n, f);
    return std::string(b.begin(), b.end());
  }
  void skip(std::size_t n, const char* f) { bytes(n, f); }

  const std::string& what() const { return what_; }

 private:
  std::uint64_t le(int n, const char* field) {
    need(static_cast<std::size_t>(n), field);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string what_;
};

/// a * b, or throws TruncatedError when the product exceeds `limit` (the
/// element count the remaining payload could hold).
inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b, std::uint64_t limit, const std::string& what) {
  if (a != 0 && b > limit / a) throw TruncatedError(what + ": declared size exceeds the payload");
  return a * b;
}

}  // namespace emoanti::detail
