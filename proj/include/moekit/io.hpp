/* Copyright 2026 The moekit Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>

#include "moekit/tensor.hpp"

namespace moekit::io {

// All on-disk integers and floats are little-endian, written byte by byte so
// the format does not depend on host endianness.

inline void write_u32(std::ostream& os, uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

inline void write_u64(std::ostream& os, uint64_t v) {
  write_u32(os, static_cast<uint32_t>(v & 0xffffffffu));
  write_u32(os, static_cast<uint32_t>(v >> 32));
}

inline void write_f32(std::ostream& os, float v) { write_u32(os, std::bit_cast<uint32_t>(v)); }

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void write_tensor(std::ostream& os, const Tensor2& t) {
  write_u32(os, static_cast<uint32_t>(t.rows));
  write_u32(os, static_cast<uint32_t>(t.cols));
  for (float v : t.data) write_f32(os, v);
}

[[noreturn]] inline void fail_truncated() { throw std::runtime_error("corrupt file: truncated"); }

inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) fail_truncated();
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline uint64_t read_u64(std::istream& is) {
  const uint64_t lo = read_u32(is);
  const uint64_t hi = read_u32(is);
  return lo | (hi << 32);
}

inline float read_f32(std::istream& is) { return std::bit_cast<float>(read_u32(is)); }

inline std::string read_string(std::istream& is, uint32_t max_len = 1u << 20) {
  const uint32_t n = read_u32(is);
  if (n > max_len) throw std::runtime_error("corrupt file: unreasonable string length");
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), n)) fail_truncated();
  return s;
}

inline Tensor2 read_tensor(std::istream& is, uint32_t max_dim = 1u << 24) {
  const uint32_t rows = read_u32(is);
  const uint32_t cols = read_u32(is);
  if (rows > max_dim || cols > max_dim) throw std::runtime_error("corrupt file: unreasonable tensor shape");
  Tensor2 t(static_cast<int>(rows), static_cast<int>(cols));
  for (auto& v : t.data) v = read_f32(is);
  return t;
}

inline void expect_magic(std::istream& is, const char magic[4], const char* what) {
  char b[4];
  if (!is.read(b, 4)) fail_truncated();
  if (b[0] != magic[0] || b[1] != magic[1] || b[2] != magic[2] || b[3] != magic[3]) {
    throw std::runtime_error(std::string("bad magic: not a ") + what + " file");
  }
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + path);
  return is;
}

}  // namespace moekit::io
