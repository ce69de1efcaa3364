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

#include "rpd/tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include "rpd/error.hpp"

namespace rpd::io {

using diff::Tensor;

namespace {

constexpr const char* kMagic = "RPDT";

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
}

std::string encode_floats(std::span<const float> values) {
  std::string bytes(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t le = to_little(std::bit_cast<std::uint32_t>(values[i]));
    std::memcpy(bytes.data() + 4 * i, &le, 4);
  }
  return bytes;
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (ctx_ == nullptr || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) {
      throw Error(ErrorCode::IoError, "SHA-256 unavailable");
    }
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::string_view bytes) { EVP_DigestUpdate(ctx_, bytes.data(), bytes.size()); }

  std::string hex() {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, digest, &len);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out.push_back(kHex[digest[i] >> 4]);
      out.push_back(kHex[digest[i] & 0xf]);
    }
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

}  // namespace

const Tensor* TensorFile::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

const Tensor& TensorFile::get(const std::string& name) const {
  if (const Tensor* t = find(name)) return *t;
  throw Error(ErrorCode::CorruptCheckpoint, "missing tensor '" + name + "'");
}

void TensorFile::put(std::string name, Tensor t) {
  for (auto& [n, existing] : tensors) {
    if (n == name) {
      existing = std::move(t);
      return;
    }
  }
  tensors.emplace_back(std::move(name), std::move(t));
}

std::string sha256_hex(std::string_view bytes) {
  Sha256 sha;
  sha.update(bytes);
  return sha.hex();
}

std::string content_hash(const std::vector<std::pair<std::string, Tensor>>& tensors) {
  Sha256 sha;
  for (const auto& [name, t] : tensors) {
    sha.update(name);
    sha.update(std::string_view("\0", 1));
    sha.update(diff::shape_string(t.shape()));
    sha.update(encode_floats(t.data()));
  }
  return sha.hex();
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  nlohmann::json header;
  header["format_version"] = kFormatVersion;
  header["content_hash"] = content_hash(file.tensors);
  header["meta"] = file.meta;
  header["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : file.tensors) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
    offset += t.size() * 4;
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    out << kMagic << ' ' << kFormatVersion << '\n' << text.size() << '\n' << text << '\n';
    for (const auto& entry : file.tensors) out << encode_floats(entry.second.data());
    if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::string magic;
  int version = 0;
  std::size_t header_len = 0;
  if (!(in >> magic >> version) || magic != kMagic) {
    throw Error(ErrorCode::CorruptCheckpoint, path.string() + ": not a tensor file");
  }
  if (version != kFormatVersion) {
    throw Error(ErrorCode::VersionMismatch,
                "format version " + std::to_string(version) + ", expected " + std::to_string(kFormatVersion));
  }
  if (!(in >> header_len) || in.get() != '\n') throw Error(ErrorCode::CorruptCheckpoint, "bad header length");
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len)) || in.get() != '\n') {
    throw Error(ErrorCode::CorruptCheckpoint, path.string() + ": truncated header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, std::string("header: ") + e.what());
  }
  if (header.value("format_version", -1) != kFormatVersion) {
    throw Error(ErrorCode::VersionMismatch, "header format version mismatch");
  }
  std::ostringstream rest;
  rest << in.rdbuf();
  const std::string payload = rest.str();

  TensorFile file;
  file.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    const auto shape = entry.at("shape").get<diff::Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto count = entry.at("count").get<std::size_t>();
    if (diff::shape_size(shape) != count || offset + count * 4 > payload.size()) {
      throw Error(ErrorCode::CorruptCheckpoint, path.string() + ": truncated payload");
    }
    std::vector<float> values(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t le;
      std::memcpy(&le, payload.data() + offset + 4 * i, 4);
      values[i] = std::bit_cast<float>(to_little(le));
    }
    file.tensors.emplace_back(entry.at("name").get<std::string>(), Tensor(shape, std::move(values)));
  }
  if (content_hash(file.tensors) != header.value("content_hash", std::string())) {
    throw Error(ErrorCode::CorruptCheckpoint, path.string() + ": content hash mismatch");
  }
  return file;
}

}  // namespace rpd::io
