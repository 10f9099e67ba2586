#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>

#include "pagnol/error.hpp"

namespace pagnol::detail {

// Little-endian encoding independent of host byte order.
template <class UInt>
void put_le(std::ostream& out, UInt value) {
  static_assert(std::is_unsigned_v<UInt>);
  char buf[sizeof(UInt)];
  for (std::size_t i = 0; i < sizeof(UInt); ++i) buf[i] = static_cast<char>((value >> (8 * i)) & 0xff);
  out.write(buf, sizeof(UInt));
}

template <class UInt>
UInt get_le(std::istream& in) {
  static_assert(std::is_unsigned_v<UInt>);
  unsigned char buf[sizeof(UInt)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(UInt))) throw IoError("unexpected end of file");
  UInt v = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) v |= static_cast<UInt>(buf[i]) << (8 * i);
  return v;
}

inline void put_f32(std::ostream& out, float f) { put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(std::istream& in) { return std::bit_cast<float>(get_le<std::uint32_t>(in)); }

inline void put_magic(std::ostream& out, const char (&magic)[9]) { out.write(magic, 8); }

inline void expect_magic(std::istream& in, const char (&magic)[9], const std::string& what) {
  char buf[8];
  if (!in.read(buf, 8) || std::memcmp(buf, magic, 8) != 0) throw IoError("not a " + what + " file (bad magic)");
}

}  // namespace pagnol::detail
