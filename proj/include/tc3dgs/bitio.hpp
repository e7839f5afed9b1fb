#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include <zlib.h>

#include "tc3dgs/error.hpp"

namespace tc3dgs {

// Little-endian byte sink. All multi-byte fields go through here so the
// on-disk layout is independent of host endianness.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put_le(v, 2); }
  void u32(std::uint32_t v) { put_le(v, 4); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void tag(const char (&s)[5]) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(s[i]));
  }

  void patch_u32(std::size_t at, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
  }

  std::size_t size() const { return buf_.size(); }
  std::vector<std::uint8_t>& data() { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  std::vector<std::uint8_t> buf_;
};

// Bounds-checked little-endian reader. Every read past the end throws a
// DecodeError carrying the absolute offset (base + local position).
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data, std::size_t base = 0)
      : data_(data), base_(base) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get_le(1, "u8")); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get_le(2, "u16")); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4, "u32")); }
  float f32() { return std::bit_cast<float>(u32()); }

  std::span<const std::uint8_t> bytes(std::size_t n, const char* what = "bytes") {
    require(n, what);
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  void expect_tag(const char (&s)[5]) {
    auto b = bytes(4, "magic");
    if (std::memcmp(b.data(), s, 4) != 0) {
      throw DecodeError(std::string("bad magic, expected '") + s + "'", base_ + pos_ - 4);
    }
  }

  std::size_t pos() const { return pos_; }
  std::size_t offset() const { return base_ + pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool done() const { return pos_ == data_.size(); }

  void require(std::size_t n, const char* what) const {
    if (n > remaining()) {
      throw DecodeError(std::string("truncated ") + what + ": need " + std::to_string(n) +
                            " bytes, have " + std::to_string(remaining()),
                        base_ + pos_);
    }
  }

 private:
  std::uint64_t get_le(int n, const char* what) {
    require(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t{data_[pos_ + i]} << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

// LSB-first bit stream. Fields of `width` bits are appended back to back;
// the stream is padded to a whole byte only when finished.
class BitWriter {
 public:
  void put(std::uint32_t value, int width) {
    for (int i = 0; i < width; ++i) {
      if (nbits_ % 8 == 0) buf_.push_back(0);
      if ((value >> i) & 1u) buf_.back() |= static_cast<std::uint8_t>(1u << (nbits_ % 8));
      ++nbits_;
    }
  }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
  std::size_t nbits_ = 0;
};

class BitReader {
 public:
  BitReader(std::span<const std::uint8_t> data, std::size_t base) : data_(data), base_(base) {}

  std::uint32_t get(int width) {
    if (nbits_ + static_cast<std::size_t>(width) > data_.size() * 8) {
      throw DecodeError("truncated bit-packed field", base_ + nbits_ / 8);
    }
    std::uint32_t v = 0;
    for (int i = 0; i < width; ++i, ++nbits_) {
      if ((data_[nbits_ / 8] >> (nbits_ % 8)) & 1u) v |= 1u << i;
    }
    return v;
  }

  std::size_t bits_read() const { return nbits_; }
  std::size_t offset() const { return base_ + nbits_ / 8; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t base_;
  std::size_t nbits_ = 0;
};

inline std::size_t packed_bytes(std::size_t count, int width) {
  return (count * static_cast<std::size_t>(width) + 7) / 8;
}

inline std::uint32_t crc32(std::span<const std::uint8_t> data) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, data.data(), static_cast<uInt>(data.size())));
}

}  // namespace tc3dgs
