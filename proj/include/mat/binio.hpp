#pragma once
// Little-endian binary readers/writers with a running CRC32, shared by the
// dataset and checkpoint formats. Integers and floats are written in fixed
// widths regardless of host (the project only targets little-endian hosts;
// a static_assert guards the byte order).

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mat/common.hpp"

namespace mat::binio {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts unsupported");

// CRC-32 (IEEE 802.3, polynomial 0xEDB88320, reflected, init/xorout
// 0xFFFFFFFF), table-driven.
class Crc32 {
 public:
  void update(const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i)
      state_ = table()[(state_ ^ p[i]) & 0xff] ^ (state_ >> 8);
  }
  uint32_t value() const { return state_ ^ 0xffffffffu; }

 private:
  static const uint32_t* table() {
    static const auto t = [] {
      std::array<uint32_t, 256> tab{};
      for (uint32_t i = 0; i < 256; ++i) {
        uint32_t c = i;
        for (int k = 0; k < 8; ++k)
          c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
        tab[i] = c;
      }
      return tab;
    }();
    return t.data();
  }
  uint32_t state_ = 0xffffffffu;
};

class Writer {
 public:
  explicit Writer(const std::string& path)
      : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw FormatError("cannot open for writing: " + path);
  }

  void bytes(const void* data, size_t len) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
    crc_.update(data, len);
  }
  void u8(uint8_t v) { bytes(&v, 1); }
  void u16(uint16_t v) { bytes(&v, 2); }
  void u32(uint32_t v) { bytes(&v, 4); }
  void u64(uint64_t v) { bytes(&v, 8); }
  void i32(int32_t v) { bytes(&v, 4); }
  void f32(float v) { bytes(&v, 4); }
  void f64(double v) { bytes(&v, 8); }
  void str(const std::string& s) {
    if (s.size() > 0xffff) throw FormatError("string field too long");
    u16(static_cast<uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void f32_array(const float* p, size_t n) { bytes(p, n * sizeof(float)); }
  void f64_array(const double* p, size_t n) { bytes(p, n * sizeof(double)); }
  void i32_array(const int32_t* p, size_t n) { bytes(p, n * sizeof(int32_t)); }

  uint32_t crc() const { return crc_.value(); }

  // Writes the running CRC (not feeding it back into itself) and closes.
  void finish_with_crc() {
    uint32_t c = crc_.value();
    out_.write(reinterpret_cast<const char*>(&c), 4);
    out_.close();
    if (!out_) throw FormatError("write failed: " + path_);
  }

 private:
  std::ofstream out_;
  std::string path_;
  Crc32 crc_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open for reading: " + path);
    in.seekg(0, std::ios::end);
    auto size = in.tellg();
    in.seekg(0);
    buf_.resize(static_cast<size_t>(size));
    in.read(reinterpret_cast<char*>(buf_.data()),
            static_cast<std::streamsize>(buf_.size()));
    if (!in) throw FormatError("read failed: " + path);
  }

  size_t size() const { return buf_.size(); }
  size_t pos() const { return pos_; }
  size_t remaining() const { return buf_.size() - pos_; }

  void bytes(void* data, size_t len) {
    if (len > remaining())
      throw TruncationError(path_ + ": truncated (wanted " +
                            std::to_string(len) + " bytes, have " +
                            std::to_string(remaining()) + ")");
    std::memcpy(data, buf_.data() + pos_, len);
    pos_ += len;
  }
  uint8_t u8() { return scalar<uint8_t>(); }
  uint16_t u16() { return scalar<uint16_t>(); }
  uint32_t u32() { return scalar<uint32_t>(); }
  uint64_t u64() { return scalar<uint64_t>(); }
  int32_t i32() { return scalar<int32_t>(); }
  float f32() { return scalar<float>(); }
  double f64() { return scalar<double>(); }
  std::string str() {
    uint16_t n = u16();
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  void f32_array(float* p, size_t n) { bytes(p, n * sizeof(float)); }
  void f64_array(double* p, size_t n) { bytes(p, n * sizeof(double)); }
  void i32_array(int32_t* p, size_t n) { bytes(p, n * sizeof(int32_t)); }

  // CRC over [0, pos), compared against the trailing u32. Call when the
  // payload has been consumed and only the checksum remains.
  void verify_trailing_crc() {
    if (remaining() != 4)
      throw TruncationError(path_ + ": expected 4 trailing checksum bytes, " +
                            std::to_string(remaining()) + " present");
    Crc32 crc;
    crc.update(buf_.data(), pos_);
    uint32_t stored = u32();
    if (crc.value() != stored)
      throw ChecksumError(path_ + ": checksum mismatch");
  }

 private:
  template <typename T>
  T scalar() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  std::string path_;
  std::vector<unsigned char> buf_;
  size_t pos_ = 0;
};

}  // namespace mat::binio
