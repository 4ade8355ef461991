#pragma once

// Little-endian primitive readers/writers shared by the HTEN, HPCD and
// checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "hyperlab/errors.hpp"

namespace hyperlab::binio {

template <typename T>
  requires std::is_trivially_copyable_v<T>
void write_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
  if (!out) throw IoError("write failed");
}

template <typename T>
  requires std::is_trivially_copyable_v<T>
T read_le(std::istream& in, const char* what = "value") {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw TruncatedError(std::string("truncated payload while reading ") + what);
  }
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

inline void write_magic(std::ostream& out, const char (&magic)[5]) {
  out.write(magic, 4);
  if (!out) throw IoError("write failed");
}

inline void expect_magic(std::istream& in, const char (&magic)[5]) {
  char got[4] = {};
  in.read(got, 4);
  if (in.gcount() != 4) throw TruncatedError(std::string("truncated before ") + magic + " magic");
  if (std::memcmp(got, magic, 4) != 0) {
    throw FormatError(std::string("bad magic, expected ") + magic);
  }
}

}  // namespace hyperlab::binio
