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

#include "keyvol/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "keyvol/errors.hpp"

namespace keyvol {
namespace fs = std::filesystem;
using nlohmann::json;

std::string dtype_name(DType dtype) {
  switch (dtype) {
    case DType::kFloat32: return "float32";
    case DType::kFloat64: return "float64";
    case DType::kUInt8: return "uint8";
    case DType::kInt32: return "int32";
  }
  return "unknown";
}

DType dtype_from_name(const std::string& name) {
  if (name == "float32") return DType::kFloat32;
  if (name == "float64") return DType::kFloat64;
  if (name == "uint8") return DType::kUInt8;
  if (name == "int32") return DType::kInt32;
  throw DataError("unknown element type '" + name + "'");
}

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::kFloat32: return 4;
    case DType::kFloat64: return 8;
    case DType::kUInt8: return 1;
    case DType::kInt32: return 4;
  }
  return 0;
}

namespace {

template <typename T>
void store_le(const T& value, std::uint8_t* out) {
  std::memcpy(out, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(out, out + sizeof(T));
}

template <typename T>
T load_le(const std::uint8_t* in) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, in, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

std::string entry_file_name(const std::string& name) { return name + ".bin"; }

// ustar helpers. Only regular files are written or understood.
constexpr std::size_t kBlock = 512;

void write_octal(char* field, std::size_t width, std::uint64_t value) {
  std::string digits;
  do {
    digits.insert(digits.begin(), static_cast<char>('0' + (value & 7)));
    value >>= 3;
  } while (value != 0);
  if (digits.size() > width - 1) throw DataError("tar field overflow");
  std::memset(field, '0', width - 1);
  std::memcpy(field + (width - 1 - digits.size()), digits.data(), digits.size());
  field[width - 1] = '\0';
}

std::uint64_t read_octal(const char* field, std::size_t width) {
  std::uint64_t value = 0;
  for (std::size_t i = 0; i < width && field[i] != '\0' && field[i] != ' '; ++i) {
    if (field[i] < '0' || field[i] > '7') throw DataError("malformed tar header");
    value = value * 8 + static_cast<std::uint64_t>(field[i] - '0');
  }
  return value;
}

void append_tar_member(std::vector<std::uint8_t>& out, const std::string& name,
                       const std::vector<std::uint8_t>& bytes) {
  if (name.size() >= 100) throw DataError("tar member name too long: " + name);
  char header[kBlock];
  std::memset(header, 0, kBlock);
  std::memcpy(header, name.data(), name.size());
  write_octal(header + 100, 8, 0644);
  write_octal(header + 108, 8, 0);
  write_octal(header + 116, 8, 0);
  write_octal(header + 124, 12, bytes.size());
  write_octal(header + 136, 12, 0);
  header[156] = '0';
  std::memcpy(header + 257, "ustar", 6);
  std::memcpy(header + 263, "00", 2);
  std::memset(header + 148, ' ', 8);
  unsigned checksum = 0;
  for (std::size_t i = 0; i < kBlock; ++i) checksum += static_cast<unsigned char>(header[i]);
  write_octal(header + 148, 7, checksum);
  header[155] = ' ';
  out.insert(out.end(), header, header + kBlock);
  out.insert(out.end(), bytes.begin(), bytes.end());
  std::size_t pad = (kBlock - bytes.size() % kBlock) % kBlock;
  out.insert(out.end(), pad, 0);
}

}  // namespace

void TensorArchive::put(const std::string& name, const Tensor& tensor, DType dtype) {
  TensorEntry entry;
  entry.shape = tensor.shape();
  entry.dtype = dtype;
  const std::size_t width = dtype_size(dtype);
  entry.bytes.resize(tensor.numel() * width);
  for (std::size_t i = 0; i < tensor.numel(); ++i) {
    std::uint8_t* dst = entry.bytes.data() + i * width;
    const double v = tensor[i];
    switch (dtype) {
      case DType::kFloat32: store_le(static_cast<float>(v), dst); break;
      case DType::kFloat64: store_le(v, dst); break;
      case DType::kUInt8: *dst = static_cast<std::uint8_t>(v); break;
      case DType::kInt32: store_le(static_cast<std::int32_t>(v), dst); break;
    }
  }
  entries_[name] = std::move(entry);
}

void TensorArchive::put_raw(const std::string& name, TensorEntry entry) {
  const auto expected = static_cast<std::size_t>(shape_numel(entry.shape)) * dtype_size(entry.dtype);
  if (entry.bytes.size() != expected) {
    throw DataError("entry '" + name + "': " + std::to_string(entry.bytes.size()) +
                    " bytes for shape " + shape_string(entry.shape));
  }
  entries_[name] = std::move(entry);
}

const TensorEntry& TensorArchive::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw DataError("missing entry '" + name + "'");
  return it->second;
}

Tensor TensorArchive::get(const std::string& name) const {
  const TensorEntry& e = entry(name);
  Tensor out(e.shape);
  const std::size_t width = dtype_size(e.dtype);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const std::uint8_t* src = e.bytes.data() + i * width;
    switch (e.dtype) {
      case DType::kFloat32: out[i] = load_le<float>(src); break;
      case DType::kFloat64: out[i] = load_le<double>(src); break;
      case DType::kUInt8: out[i] = *src; break;
      case DType::kInt32: out[i] = load_le<std::int32_t>(src); break;
    }
  }
  return out;
}

Tensor TensorArchive::get(const std::string& name, const Shape& expected) const {
  const TensorEntry& e = entry(name);
  if (e.shape != expected) {
    throw ShapeError("entry '" + name + "': expected shape " + shape_string(expected) +
                     ", found " + shape_string(e.shape));
  }
  return get(name);
}

json TensorArchive::manifest() const {
  json entries = json::object();
  for (const auto& [name, e] : entries_) {
    entries[name] = {{"shape", e.shape},
                     {"dtype", dtype_name(e.dtype)},
                     {"byte_order", "little"},
                     {"file", entry_file_name(name)}};
  }
  return {{"format", "keyvol-tensors"},
          {"format_version", kFormatVersion},
          {"kind", kind_},
          {"entries", entries},
          {"meta", meta_}};
}

TensorArchive TensorArchive::from_manifest(
    const json& manifest,
    const std::function<std::vector<std::uint8_t>(const std::string&)>& read_file) {
  if (!manifest.is_object() || manifest.value("format", "") != "keyvol-tensors") {
    throw DataError("not a keyvol tensor manifest");
  }
  const int version = manifest.value("format_version", -1);
  if (version != kFormatVersion) {
    throw DataError("unsupported format version " + std::to_string(version) + " (expected " +
                    std::to_string(kFormatVersion) + ")");
  }
  TensorArchive archive(manifest.value("kind", ""));
  archive.meta_ = manifest.value("meta", json::object());
  for (const auto& [name, spec] : manifest.at("entries").items()) {
    if (spec.value("byte_order", "little") != "little") {
      throw DataError("entry '" + name + "': unsupported byte order");
    }
    TensorEntry e;
    e.shape = spec.at("shape").get<Shape>();
    e.dtype = dtype_from_name(spec.at("dtype").get<std::string>());
    e.bytes = read_file(spec.at("file").get<std::string>());
    const auto expected_bytes =
        static_cast<std::size_t>(shape_numel(e.shape)) * dtype_size(e.dtype);
    if (e.bytes.size() != expected_bytes) {
      throw ShapeError("entry '" + name + "': manifest shape " + shape_string(e.shape) +
                       " needs " + std::to_string(expected_bytes) + " bytes, file has " +
                       std::to_string(e.bytes.size()));
    }
    archive.entries_[name] = std::move(e);
  }
  return archive;
}

void TensorArchive::write_directory(const fs::path& dir) const {
  fs::create_directories(dir);
  for (const auto& [name, e] : entries_) write_file_bytes(dir / entry_file_name(name), e.bytes);
  write_text_file(dir / kManifestName, manifest().dump(2));
}

TensorArchive TensorArchive::read_directory(const fs::path& dir) {
  const fs::path manifest_path = dir / kManifestName;
  if (!fs::exists(manifest_path)) throw DataError("no manifest at " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(read_text_file(manifest_path));
  } catch (const json::exception& e) {
    throw DataError("unreadable manifest " + manifest_path.string() + ": " + e.what());
  }
  return from_manifest(manifest, [&](const std::string& file) {
    return read_file_bytes(dir / file);
  });
}

void TensorArchive::write_tar(const fs::path& file) const {
  std::vector<std::uint8_t> out;
  const std::string text = manifest().dump(2);
  append_tar_member(out, kManifestName, std::vector<std::uint8_t>(text.begin(), text.end()));
  for (const auto& [name, e] : entries_) append_tar_member(out, entry_file_name(name), e.bytes);
  out.insert(out.end(), 2 * kBlock, 0);
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  write_file_bytes(file, out);
}

TensorArchive TensorArchive::read_tar(const fs::path& file) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(file);
  std::map<std::string, std::vector<std::uint8_t>> members;
  std::size_t pos = 0;
  while (pos + kBlock <= bytes.size()) {
    const char* header = reinterpret_cast<const char*>(bytes.data() + pos);
    if (std::all_of(header, header + kBlock, [](char c) { return c == 0; })) break;
    std::string name(header, strnlen(header, 100));
    const std::uint64_t size = read_octal(header + 124, 12);
    pos += kBlock;
    if (pos + size > bytes.size()) throw DataError("truncated archive " + file.string());
    if (header[156] == '0' || header[156] == '\0') {
      members[name].assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                           bytes.begin() + static_cast<std::ptrdiff_t>(pos + size));
    }
    pos += (size + kBlock - 1) / kBlock * kBlock;
  }
  auto it = members.find(kManifestName);
  if (it == members.end()) throw DataError("archive " + file.string() + " has no manifest");
  json manifest;
  try {
    manifest = json::parse(std::string(it->second.begin(), it->second.end()));
  } catch (const json::exception& e) {
    throw DataError("unreadable manifest in " + file.string() + ": " + e.what());
  }
  return from_manifest(manifest, [&](const std::string& name) {
    auto m = members.find(name);
    if (m == members.end()) throw DataError("archive member '" + name + "' missing");
    return m->second;
  });
}

std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

void write_file_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace keyvol
