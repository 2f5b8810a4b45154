// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "okd/tensor.hpp"

namespace okd {

// Binary tensor container: magic "ODT1", u32 rank, rank x u64 dims,
// row-major little-endian f64 payload. Byte order is written explicitly so
// files are identical on any host.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline void put_f64(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(os, bits);
}

inline double get_f64(std::istream& is) {
  const std::uint64_t bits = get_u64(is);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write("ODT1", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (const std::size_t d : t.shape()) detail::put_u64(os, d);
  for (const double v : t.data()) detail::put_f64(os, v);
  if (!os) throw std::runtime_error("write_tensor: stream failure");
}

inline void write_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("write_tensor: cannot open " + path);
  write_tensor(os, t);
}

inline Tensor read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "ODT1", 4) != 0)
    throw std::runtime_error("read_tensor: bad magic, not an ODT1 file");
  const std::uint32_t rank = detail::get_u32(is);
  if (rank > 8) throw std::runtime_error("read_tensor: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<std::size_t>(detail::get_u64(is));
  std::vector<double> data(shape_size(shape));
  for (double& v : data) v = detail::get_f64(is);
  if (!is) throw std::runtime_error("read_tensor: truncated payload");
  return Tensor(std::move(shape), std::move(data));
}

inline Tensor read_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_tensor: cannot open " + path);
  return read_tensor(is);
}

}  // namespace okd
