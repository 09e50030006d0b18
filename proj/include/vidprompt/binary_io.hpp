// SPDX-License-Identifier: Apache-2.0
//
// Little-endian scalar encoding for the on-disk formats.

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <iterator>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace vidprompt::binary {

template <class U>
void append_le(std::vector<std::uint8_t>& out, U value) {
  static_assert(std::is_arithmetic_v<U>);
  std::uint8_t bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.insert(out.end(), bytes, bytes + sizeof(U));
}

inline void append_bytes(std::vector<std::uint8_t>& out, const std::string& s) {
  out.insert(out.end(), s.begin(), s.end());
}

// Sequential reader over an in-memory buffer.
class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& buf, std::size_t end = std::string::npos)
      : buf_(buf), end_(end == std::string::npos ? buf.size() : end) {}

  template <class U>
  U read() {
    static_assert(std::is_arithmetic_v<U>);
    need(sizeof(U));
    std::uint8_t bytes[sizeof(U)];
    std::memcpy(bytes, buf_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    pos_ += sizeof(U);
    U value;
    std::memcpy(&value, bytes, sizeof(U));
    return value;
  }

  std::string read_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t position() const { return pos_; }
  bool at_end() const { return pos_ >= end_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw std::runtime_error("binary: unexpected end of data");
  }

  const std::vector<std::uint8_t>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_all(std::istream& in) {
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_all(std::ostream& out, const std::vector<std::uint8_t>& bytes) {
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("binary: write failed");
}

}  // namespace vidprompt::binary
