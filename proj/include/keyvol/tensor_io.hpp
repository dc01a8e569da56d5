// Copyright 2026 The keyvol Authors
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

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "keyvol/tensor.hpp"

namespace keyvol {

enum class DType { kFloat32, kFloat64, kUInt8, kInt32 };

std::string dtype_name(DType dtype);
DType dtype_from_name(const std::string& name);
std::size_t dtype_size(DType dtype);

struct TensorEntry {
  Shape shape;
  DType dtype = DType::kFloat64;
  std::vector<std::uint8_t> bytes;  // little-endian
};

/// Named raw tensors plus a JSON manifest.
///
/// This is the one container used for feature bundles, checkpoints and rig
/// weights. On disk it is either a directory (`manifest.json` + one `.bin`
/// file per entry) or a single ustar archive holding the same files.
///
/// Manifest layout:
///
///     {"format": "keyvol-tensors", "format_version": 1, "kind": "...",
///      "entries": {"<name>": {"shape": [...], "dtype": "float32",
///                             "byte_order": "little", "file": "<name>.bin"}},
///      "meta": {...}}
class TensorArchive {
 public:
  static constexpr int kFormatVersion = 1;
  static constexpr const char* kManifestName = "manifest.json";

  TensorArchive() = default;
  explicit TensorArchive(std::string kind) : kind_(std::move(kind)) {}

  const std::string& kind() const { return kind_; }
  nlohmann::json& meta() { return meta_; }
  const nlohmann::json& meta() const { return meta_; }

  void put(const std::string& name, const Tensor& tensor, DType dtype);
  void put_raw(const std::string& name, TensorEntry entry);

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  const TensorEntry& entry(const std::string& name) const;
  const std::map<std::string, TensorEntry>& entries() const { return entries_; }

  // Converts to float64. The shape-checked overload throws a ShapeError
  // naming the entry with expected and found shapes.
  Tensor get(const std::string& name) const;
  Tensor get(const std::string& name, const Shape& expected) const;

  nlohmann::json manifest() const;

  void write_directory(const std::filesystem::path& dir) const;
  static TensorArchive read_directory(const std::filesystem::path& dir);

  void write_tar(const std::filesystem::path& file) const;
  static TensorArchive read_tar(const std::filesystem::path& file);

  // Shared by both readers: `read_file` returns the bytes of a named member.
  static TensorArchive from_manifest(
      const nlohmann::json& manifest,
      const std::function<std::vector<std::uint8_t>(const std::string&)>& read_file);

 private:
  std::string kind_;
  nlohmann::json meta_ = nlohmann::json::object();
  std::map<std::string, TensorEntry> entries_;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace keyvol
