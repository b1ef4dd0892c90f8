#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mtl/error.hpp"

namespace mtl {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written little-endian; add byte swapping for this target");

class ByteWriter {
 public:
  void magic(std::string_view tag) { bytes_.insert(bytes_.end(), tag.begin(), tag.end()); }
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void f64s(std::span<const double> v) { raw(v.data(), v.size_bytes()); }
  void bytes(std::span<const std::uint8_t> v) { bytes_.insert(bytes_.end(), v.begin(), v.end()); }

  std::vector<std::uint8_t>& buffer() noexcept { return bytes_; }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void expect_magic(std::string_view tag) {
    need(tag.size());
    if (std::memcmp(bytes_.data() + pos_, tag.data(), tag.size()) != 0) {
      throw ParseError("bad magic, expected '" + std::string(tag) + "'");
    }
    pos_ += tag.size();
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint32_t u32() { return read<std::uint32_t>(); }
  std::uint64_t u64() { return read<std::uint64_t>(); }
  double f64() { return read<double>(); }
  void f64s(std::span<double> out) {
    need(out.size_bytes());
    std::memcpy(out.data(), bytes_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }
  void bytes(std::span<std::uint8_t> out) {
    need(out.size());
    std::memcpy(out.data(), bytes_.data() + pos_, out.size());
    pos_ += out.size();
  }
  // Guards element counts read from a header before allocating.
  std::uint64_t count(std::uint64_t limit, const char* what) {
    const auto v = u64();
    if (v > limit) throw ParseError(std::string("implausible ") + what + ": " + std::to_string(v));
    return v;
  }

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }

 private:
  template <typename T>
  T read() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw ParseError("truncated input");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace mtl
