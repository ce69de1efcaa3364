// Copyright 2026 The RobustPrompt3D Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "rpd/tensor.hpp"

namespace rpd::io {

inline constexpr int kFormatVersion = 1;

/// Named tensors plus free-form metadata. Order of `tensors` is preserved on
/// disk and in the content hash.
struct TensorFile {
  std::vector<std::pair<std::string, diff::Tensor>> tensors;
  nlohmann::json meta = nlohmann::json::object();

  const diff::Tensor& get(const std::string& name) const;
  const diff::Tensor* find(const std::string& name) const;
  void put(std::string name, diff::Tensor t);
};

std::string sha256_hex(std::string_view bytes);

/// Hex SHA-256 over names, shapes and little-endian float payloads.
std::string content_hash(const std::vector<std::pair<std::string, diff::Tensor>>& tensors);

/// Layout:
///   line 1   "RPDT <format_version>"
///   line 2   byte length L of the JSON header
///   L bytes  JSON header {format_version, content_hash, meta,
///            tensors: [{name, shape, offset, count}]}
///   '\n'
///   payload  float32 little-endian, offsets relative to payload start
void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);

/// Throws VersionMismatch on a foreign format version, CorruptCheckpoint on
/// truncation or hash mismatch, IoError when the file cannot be opened.
TensorFile read_tensor_file(const std::filesystem::path& path);

}  // namespace rpd::io
