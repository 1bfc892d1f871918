#pragma once

// Little-endian record encoding shared by every .ttdg file: an 8-byte magic
// tag, a u16 format version, format-specific header fields, the payload,
// and a trailing FNV-1a 64-bit checksum of the payload bytes.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ttdg/errors.hpp"

namespace ttdg::io {

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u16(std::uint16_t v) { bytes(&v, 2); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  void f64s(std::span<const double> v) { bytes(v.data(), v.size() * 8); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void magic(std::string_view tag) { bytes(tag.data(), tag.size()); }

  std::size_t size() const { return buf_.size(); }
  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> data, std::string what)
      : data_(data), what_(std::move(what)) {}

  void bytes(void* p, std::size_t n) {
    if (n > data_.size() - pos_) {
      throw CorruptFileError(what_ + ": truncated at byte " + std::to_string(pos_));
    }
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
  std::uint16_t u16() { std::uint16_t v; bytes(&v, 2); return v; }
  std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
  std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
  double f64() { double v; bytes(&v, 8); return v; }
  void f64s(std::span<double> out) {
    if (out.size() > (data_.size() - pos_) / 8) {
      throw CorruptFileError(what_ + ": truncated at byte " + std::to_string(pos_));
    }
    bytes(out.data(), out.size() * 8);
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > data_.size() - pos_) {
      throw CorruptFileError(what_ + ": truncated string at byte " + std::to_string(pos_));
    }
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  void expect_magic(std::string_view tag) {
    std::string got(tag.size(), '\0');
    bytes(got.data(), got.size());
    if (got != tag) {
      throw CorruptFileError(what_ + ": bad magic tag, expected " + std::string(tag));
    }
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  std::span<const std::uint8_t> span(std::size_t from, std::size_t to) const {
    return data_.subspan(from, to - from);
  }
  const std::string& what() const { return what_; }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string what_;
};

/// Append the checksum of everything written since `payload_start`.
inline void seal(Writer& w, std::size_t payload_start) {
  const auto& b = w.buffer();
  w.u64(fnv1a64(std::span(b).subspan(payload_start)));
}

/// Read the trailing checksum and compare against bytes [payload_start, here).
inline void verify_seal(Reader& r, std::size_t payload_start) {
  const std::size_t end = r.position();
  const std::uint64_t expected = r.u64();
  if (fnv1a64(r.span(payload_start, end)) != expected) {
    throw CorruptFileError(r.what() + ": checksum mismatch");
  }
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Write through a sibling temporary and rename, so readers never observe a
/// partial file.
inline void write_file_atomic(const std::filesystem::path& path,
                              std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw DataError("short write to " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw DataError("cannot rename into " + path.string());
  }
}

inline void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()),
                                    text.size()));
}

inline std::uint64_t file_checksum(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return fnv1a64(bytes);
}

}  // namespace ttdg::io
