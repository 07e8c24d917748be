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

// Checkpoints: a directory with one PSTT file per tensor and a plain-text
// manifest, one "name<TAB>shape<TAB>file" line per tensor, in visit order.
// Normalization statistics are stored as <layer>.running_mean / .running_var.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pst/params.hpp"
#include "pst/tensor_file.hpp"

namespace pst {

inline const char* const kManifestName = "manifest.txt";

namespace detail {

struct ManifestLine {
  std::string name;
  std::string shape;
  std::string file;
};

inline std::vector<ManifestLine> read_manifest(const std::filesystem::path& dir) {
  const auto bytes = read_file_bytes((dir / kManifestName).string());
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::vector<ManifestLine> lines;
  std::string line;
  std::size_t offset = 0;
  while (std::getline(in, line)) {
    const auto a = line.find('\t');
    const auto b = a == std::string::npos ? a : line.find('\t', a + 1);
    if (b == std::string::npos) throw FormatError("malformed manifest line", offset);
    lines.push_back({line.substr(0, a), line.substr(a + 1, b - a - 1),
                     line.substr(b + 1)});
    offset += line.size() + 1;
  }
  return lines;
}

template <class T>
std::vector<std::pair<std::string, const Tensor<T>*>> buffer_tensors(
    const NormBuffers<T>& buffers) {
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  for (const auto& [layer, stats] : buffers) {
    out.emplace_back(layer + ".running_mean", &stats.mean);
    out.emplace_back(layer + ".running_var", &stats.var);
  }
  return out;
}

}  // namespace detail

template <class T, template <class> class Bundle>
void save_checkpoint(const std::string& dir, const Bundle<Tensor<T>>& params,
                     const std::string& prefix, const NormBuffers<T>& buffers = {}) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory", dir);
  std::string manifest;
  const auto put = [&](const std::string& name, const Tensor<T>& t) {
    const std::string file = name + ".pstt";
    save_tensor((fs::path(dir) / file).string(), t);
    manifest += name + '\t' + shape_str(t.shape()) + '\t' + file + '\n';
  };
  visit_params(params, prefix,
               [&](const ParamInfo& info, const Tensor<T>& t) { put(info.name, t); });
  for (const auto& [name, t] : detail::buffer_tensors(buffers)) put(name, *t);
  write_file_bytes((fs::path(dir) / kManifestName).string(),
                   std::vector<std::uint8_t>(manifest.begin(), manifest.end()));
}

template <class T, template <class> class Bundle>
Bundle<Tensor<T>> load_checkpoint(const std::string& dir,
                                  const Bundle<Shape>& shapes,
                                  const std::string& prefix,
                                  NormBuffers<T>* buffers = nullptr) {
  namespace fs = std::filesystem;
  std::map<std::string, std::string> files;
  for (const auto& l : detail::read_manifest(dir)) files[l.name] = l.file;
  const auto get = [&](const std::string& name, const Shape& expected) {
    auto it = files.find(name);
    if (it == files.end()) throw IoError("checkpoint lacks tensor " + name, dir);
    const auto path = (fs::path(dir) / it->second).string();
    Tensor<T> t = load_tensor<T>(path);
    if (t.shape() != expected) {
      throw DimensionError("checkpoint tensor " + name + " has shape " +
                           shape_str(t.shape()) + ", expected " +
                           shape_str(expected));
    }
    return t;
  };
  auto params = transform_params<Tensor<T>>(
      shapes, prefix, [&](const ParamInfo& info, const Shape& s) { return get(info.name, s); });
  if (buffers) {
    for (auto& [layer, stats] : *buffers) {
      stats.mean = get(layer + ".running_mean", stats.mean.shape());
      stats.var = get(layer + ".running_var", stats.var.shape());
    }
  }
  return params;
}

/// FNV-1a over the manifest followed by every listed file, in manifest order.
inline std::uint64_t checkpoint_checksum(const std::string& dir) {
  namespace fs = std::filesystem;
  auto bytes = read_file_bytes((fs::path(dir) / kManifestName).string());
  std::uint64_t h = fnv1a(bytes.data(), bytes.size());
  for (const auto& l : detail::read_manifest(dir)) {
    bytes = read_file_bytes((fs::path(dir) / l.file).string());
    h = fnv1a(bytes.data(), bytes.size(), h);
  }
  return h;
}

/// FNV-1a over the serialized tensors of a bundle, in visit order.
template <class T, template <class> class Bundle>
std::uint64_t params_checksum(const Bundle<Tensor<T>>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  visit_params(params, std::string{}, [&](const ParamInfo&, const Tensor<T>& t) {
    const auto bytes = encode_tensor(t);
    h = fnv1a(bytes.data(), bytes.size(), h);
  });
  return h;
}

}  // namespace pst
