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

// Grid heatmaps of key scores or attention rows: binary PGM (P5, 8-bit,
// min-max normalized) or CSV with one line per grid row.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pst/tensor.hpp"
#include "pst/tensor_file.hpp"

namespace pst {

enum class HeatmapFormat { pgm, csv };

namespace detail {
inline void check_heatmap_dims(std::size_t n, GridDims dims) {
  if (n != dims.count()) {
    throw DimensionError("heatmap: " + std::to_string(n) + " values for a " +
                         std::to_string(dims.height) + "x" +
                         std::to_string(dims.width) + " grid");
  }
}
}  // namespace detail

/// Constant input maps to an all-zero image.
template <class T>
std::vector<std::uint8_t> encode_pgm(std::span<const T> s, GridDims dims) {
  detail::check_heatmap_dims(s.size(), dims);
  const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
  const double range = double(*hi) - double(*lo);
  const std::string header = "P5\n" + std::to_string(dims.width) + " " +
                             std::to_string(dims.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (T v : s) {
    const double t = range > 0 ? (double(v) - double(*lo)) / range : 0.0;
    out.push_back(static_cast<std::uint8_t>(std::lround(255.0 * t)));
  }
  return out;
}

template <class T>
std::string encode_csv(std::span<const T> s, GridDims dims) {
  detail::check_heatmap_dims(s.size(), dims);
  std::ostringstream os;
  os.precision(std::numeric_limits<T>::max_digits10);
  for (std::size_t r = 0; r < dims.height; ++r) {
    for (std::size_t c = 0; c < dims.width; ++c) {
      if (c) os << ',';
      os << s[r * dims.width + c];
    }
    os << '\n';
  }
  return os.str();
}

template <class T>
void export_heatmap(std::span<const T> s, GridDims dims, const std::string& path,
                    HeatmapFormat format) {
  if (format == HeatmapFormat::pgm) {
    write_file_bytes(path, encode_pgm(s, dims));
    return;
  }
  const std::string text = encode_csv(s, dims);
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

/// Parses CSV written by encode_csv back into a flat row-major vector.
inline std::vector<double> parse_csv(const std::string& text) {
  std::vector<double> out;
  std::istringstream lines(text);
  std::string line, cell;
  while (std::getline(lines, line)) {
    std::istringstream cells(line);
    while (std::getline(cells, cell, ',')) out.push_back(std::stod(cell));
  }
  return out;
}

}  // namespace pst
