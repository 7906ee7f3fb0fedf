#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include "gmln/error.hpp"

namespace gmln::binio {

/// Appends little-endian scalars to a byte string.
class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    le(bits, 4);
  }
  void bytes(std::string_view b) { out_.append(b); }
  const std::string& data() const { return out_; }
  std::string take() { return std::move(out_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string out_;
};

/// Bounds-checked little-endian reader; truncation throws FormatError.
class Reader {
 public:
  Reader(std::string_view data, std::string context) : data_(data), context_(std::move(context)) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  float f32() {
    const auto bits = static_cast<std::uint32_t>(le(4));
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n)
      throw FormatError(context_ + ": truncated at byte " + std::to_string(pos_) + " (needed " +
                        std::to_string(n) + " more)");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string_view data_;
  std::string context_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);
/// Writes via a temporary sibling, syncs, and renames, so readers never see a partial file.
void write_file_atomic(const std::string& path, std::string_view data);
/// Appends `line` plus a newline in a single write and syncs before returning.
void append_line(const std::string& path, std::string_view line);

}  // namespace gmln::binio
