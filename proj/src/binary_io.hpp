// SPDX-License-Identifier: Apache-2.0
//
// Explicit little-endian encoding, independent of host byte order.
#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>

#include "sparsedet/errors.hpp"

namespace sparsedet::binary {

inline void write_u64(std::ostream& os, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(bytes, 8);
}

inline void write_f64(std::ostream& os, double v) {
  write_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline bool try_read_u64(std::istream& is, std::uint64_t& v) {
  unsigned char bytes[8];
  if (!is.read(reinterpret_cast<char*>(bytes), 8)) return false;
  v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return true;
}

inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v;
  if (!try_read_u64(is, v)) throw InputError("truncated binary file");
  return v;
}

inline double read_f64(std::istream& is) {
  return std::bit_cast<double>(read_u64(is));
}

}  // namespace sparsedet::binary
