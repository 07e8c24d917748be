/* Copyright 2026 The PST Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// PSTT tensor container.
//
//   offset  size        field
//   0       4           magic "PSTT"
//   4       4           version, u32 little-endian (1)
//   8       1           dtype (0 = float32, 1 = float64)
//   9       1           ndim (>= 1)
//   10      4 * ndim    extents, u32 little-endian
//   ...     numel * sz  row-major payload, little-endian

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "pst/tensor.hpp"

namespace pst {

inline constexpr char kTensorMagic[4] = {'P', 'S', 'T', 'T'};
inline constexpr std::uint32_t kTensorVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensor files hold float32 or float64");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

namespace detail {

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
  const Bits b = std::bit_cast<Bits>(v);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<std::uint8_t>(b >> (8 * i)));
  }
}

template <class U>
U get_le(const std::uint8_t* p) {
  using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
  Bits b = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) b |= Bits(p[i]) << (8 * i);
  return std::bit_cast<U>(b);
}

}  // namespace detail

template <class T>
std::vector<std::uint8_t> encode_tensor(const Tensor<T>& t) {
  std::vector<std::uint8_t> out(std::begin(kTensorMagic), std::end(kTensorMagic));
  detail::put_le(out, kTensorVersion);
  out.push_back(static_cast<std::uint8_t>(dtype_of<T>()));
  if (t.rank() == 0 || t.rank() > 255) {
    throw ContractError("tensor files need 1..255 dimensions");
  }
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) {
    if (e > UINT32_MAX) throw ContractError("extent exceeds u32");
    detail::put_le(out, static_cast<std::uint32_t>(e));
  }
  out.reserve(out.size() + t.size() * sizeof(T));
  for (T v : t.data()) detail::put_le(out, v);
  return out;
}

/// Decoded tensor of whichever precision the file declares.
using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

inline AnyTensor decode_any_tensor(const std::vector<std::uint8_t>& bytes) {
  const auto need = [&](std::size_t offset, std::size_t n, const char* what) {
    if (bytes.size() < offset + n) {
      throw FormatError(std::string("truncated ") + what, offset);
    }
  };
  need(0, 4, "magic");
  if (std::memcmp(bytes.data(), kTensorMagic, 4) != 0) {
    throw FormatError("bad magic (expected PSTT)", 0);
  }
  need(4, 4, "version");
  const auto version = detail::get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kTensorVersion) {
    throw FormatError("unsupported version " + std::to_string(version), 4);
  }
  need(8, 2, "header");
  const std::uint8_t code = bytes[8];
  if (code > 1) throw FormatError("unknown dtype code " + std::to_string(code), 8);
  const std::size_t ndim = bytes[9];
  if (ndim == 0) throw FormatError("ndim must be >= 1", 9);
  need(10, 4 * ndim, "extents");
  Shape shape;
  for (std::size_t i = 0; i < ndim; ++i) {
    const auto e = detail::get_le<std::uint32_t>(bytes.data() + 10 + 4 * i);
    if (e == 0) throw FormatError("zero extent", 10 + 4 * i);
    shape.push_back(e);
  }
  const std::size_t start = 10 + 4 * ndim;
  const std::size_t width = code == 0 ? 4 : 8;
  const std::size_t numel = shape_numel(shape);
  need(start, numel * width, "payload");
  if (bytes.size() != start + numel * width) {
    throw FormatError("trailing bytes after payload", start + numel * width);
  }
  const auto read = [&]<class U>(U) {
    Tensor<U> t(shape);
    for (std::size_t i = 0; i < numel; ++i) {
      t[i] = detail::get_le<U>(bytes.data() + start + i * width);
    }
    return AnyTensor(std::move(t));
  };
  return code == 0 ? read(float{}) : read(double{});
}

template <class T>
Tensor<T> decode_tensor(const std::vector<std::uint8_t>& bytes) {
  AnyTensor any = decode_any_tensor(bytes);
  if (auto* t = std::get_if<Tensor<T>>(&any)) return std::move(*t);
  throw FormatError(std::string("dtype mismatch: file holds ") +
                        (std::holds_alternative<Tensor<float>>(any) ? "float32"
                                                                    : "float64"),
                    8);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading", path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path,
                             const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing", path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed", path);
}

template <class T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  write_file_bytes(path, encode_tensor(t));
}

template <class T>
Tensor<T> load_tensor(const std::string& path) {
  return decode_tensor<T>(read_file_bytes(path));
}

inline AnyTensor load_any_tensor(const std::string& path) {
  return decode_any_tensor(read_file_bytes(path));
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::uint8_t* data, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace pst
