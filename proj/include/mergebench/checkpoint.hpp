// Copyright (c) 2026, The mergebench authors
// SPDX-License-Identifier: Apache-2.0
//
// Single-file checkpoint container and block-wise streaming access.
//
// Layout (all integers and floats little-endian):
//
//   u64                 manifest length in bytes
//   manifest            UTF-8 JSON array of {"name","shape","offset","dtype"}
//   payload             raw IEEE-754 float32 values, tensors packed back to back
//
// Tensors are listed in strictly ascending lexicographic name order and
// "offset" is relative to the start of the payload. Only dtype "f32" exists.

#ifndef MERGEBENCH_CHECKPOINT_HPP
#define MERGEBENCH_CHECKPOINT_HPP

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mergebench/errors.hpp"

namespace mergebench {

inline std::size_t shape_numel(std::span<const std::int64_t> shape) {
  std::size_t n = 1;
  for (auto dim : shape) n *= static_cast<std::size_t>(dim);
  return n;
}

inline std::string shape_to_string(std::span<const std::int64_t> shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> values;  // row-major

  Tensor() = default;
  Tensor(std::vector<std::int64_t> shape_, std::vector<float> values_)
      : shape(std::move(shape_)), values(std::move(values_)) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (auto dim : shape) {
      if (dim <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape));
    }
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("tensor of shape " + shape_to_string(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
  }

  static Tensor zeros(std::vector<std::int64_t> shape) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, 0.0f));
  }

  std::size_t numel() const { return values.size(); }
  std::span<const float> view() const { return values; }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

// Ordered name -> tensor. std::map keeps the lexicographic order every module
// relies on for deterministic iteration.
using TensorMap = std::map<std::string, Tensor, std::less<>>;

inline bool all_finite(const TensorMap& map) {
  for (const auto& [name, tensor] : map) {
    for (float v : tensor.values) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

// Bitwise equality, so NaN payloads and signed zeros are compared exactly.
inline bool bit_identical(const TensorMap& a, const TensorMap& b) {
  if (a.size() != b.size()) return false;
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.shape != ib->second.shape) return false;
    const auto& va = ia->second.values;
    const auto& vb = ib->second.values;
    if (va.size() != vb.size()) return false;
    if (!va.empty() && std::memcmp(va.data(), vb.data(), va.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

struct TensorMeta {
  std::string name;
  std::vector<std::int64_t> shape;
  std::uint64_t offset = 0;
  std::string dtype = "f32";

  std::size_t numel() const { return shape_numel(shape); }
  std::uint64_t byte_size() const { return numel() * sizeof(float); }
};

struct TensorSpec {
  std::string name;
  std::vector<std::int64_t> shape;
};

struct WriteOptions {
  bool strict_finite = false;  // reject NaN / Inf values
};

namespace detail {

inline void store_u64_le(std::uint64_t v, char* out) {
  for (int i = 0; i < 8; ++i) out[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
}

inline std::uint64_t load_u64_le(const char* in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[i])) << (8 * i);
  return v;
}

inline void floats_to_le(std::span<const float> values, std::vector<char>& out) {
  out.resize(values.size() * 4);
  if constexpr (std::endian::native == std::endian::little) {
    if (!values.empty()) std::memcpy(out.data(), values.data(), out.size());
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(values[i]);
      for (int b = 0; b < 4; ++b) out[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
    }
  }
}

inline void le_to_floats(const std::vector<char>& in, std::vector<float>& values) {
  values.resize(in.size() / 4);
  if constexpr (std::endian::native == std::endian::little) {
    if (!in.empty()) std::memcpy(values.data(), in.data(), in.size());
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[4 * i + b])) << (8 * b);
      }
      values[i] = std::bit_cast<float>(bits);
    }
  }
}

inline nlohmann::json manifest_to_json(const std::vector<TensorMeta>& manifest) {
  auto arr = nlohmann::json::array();
  for (const auto& meta : manifest) {
    arr.push_back({{"name", meta.name}, {"shape", meta.shape}, {"offset", meta.offset}, {"dtype", meta.dtype}});
  }
  return arr;
}

inline std::vector<TensorMeta> manifest_from_json(const nlohmann::json& arr) {
  if (!arr.is_array()) throw FormatError("malformed manifest: expected a JSON array");
  std::vector<TensorMeta> manifest;
  manifest.reserve(arr.size());
  for (const auto& entry : arr) {
    if (!entry.is_object() || !entry.contains("name") || !entry.contains("shape") || !entry.contains("offset") ||
        !entry.contains("dtype")) {
      throw FormatError("malformed manifest: entries need name, shape, offset and dtype");
    }
    TensorMeta meta;
    try {
      meta.name = entry.at("name").get<std::string>();
      meta.dtype = entry.at("dtype").get<std::string>();
      if (!entry.at("offset").is_number_unsigned()) throw FormatError("offset must be unsigned");
      meta.offset = entry.at("offset").get<std::uint64_t>();
      if (!entry.at("shape").is_array() || entry.at("shape").empty()) throw FormatError("shape must be a nonempty array");
      for (const auto& dim : entry.at("shape")) {
        if (!dim.is_number_integer() || dim.get<std::int64_t>() <= 0) throw FormatError("dimensions must be positive");
        meta.shape.push_back(dim.get<std::int64_t>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed manifest: ") + e.what());
    } catch (const FormatError& e) {
      throw FormatError("malformed manifest: tensor '" + meta.name + "': " + e.what());
    }
    if (meta.dtype != "f32") throw FormatError("unsupported dtype '" + meta.dtype + "' for tensor '" + meta.name + "'");
    manifest.push_back(std::move(meta));
  }
  return manifest;
}

// Sorted, duplicate-free manifest with packed offsets.
inline std::vector<TensorMeta> build_manifest(std::vector<TensorSpec> specs) {
  std::sort(specs.begin(), specs.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  std::vector<TensorMeta> manifest;
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (i > 0 && specs[i].name == specs[i - 1].name) throw FormatError("duplicate tensor name '" + specs[i].name + "'");
    if (specs[i].shape.empty()) throw ShapeError("tensor '" + specs[i].name + "' has an empty shape");
    for (auto dim : specs[i].shape) {
      if (dim <= 0) throw ShapeError("tensor '" + specs[i].name + "' has a non-positive dimension");
    }
    TensorMeta meta{specs[i].name, specs[i].shape, offset, "f32"};
    offset += meta.byte_size();
    manifest.push_back(std::move(meta));
  }
  return manifest;
}

}  // namespace detail

// Writes a container one tensor at a time, in manifest order. Output goes to a
// sibling ".partial" file that is renamed into place by finish().
class ContainerWriter {
 public:
  ContainerWriter(std::filesystem::path path, std::vector<TensorSpec> specs, WriteOptions options = {})
      : path_(std::move(path)), partial_(path_), options_(options) {
    if (specs.empty()) throw FormatError("cannot write an empty container");
    manifest_ = detail::build_manifest(std::move(specs));
    partial_ += ".partial";
    out_.open(partial_, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot open '" + partial_.string() + "' for writing");
    const std::string json = detail::manifest_to_json(manifest_).dump();
    char header[8];
    detail::store_u64_le(json.size(), header);
    out_.write(header, 8);
    out_.write(json.data(), static_cast<std::streamsize>(json.size()));
    check_stream();
  }

  ContainerWriter(const ContainerWriter&) = delete;
  ContainerWriter& operator=(const ContainerWriter&) = delete;

  ~ContainerWriter() {
    if (!finished_) {
      out_.close();
      std::error_code ec;
      std::filesystem::remove(partial_, ec);
    }
  }

  const std::vector<TensorMeta>& manifest() const { return manifest_; }

  // Name of the tensor expected by the next write(), or nullopt when complete.
  std::optional<std::string_view> next_name() const {
    if (next_ >= manifest_.size()) return std::nullopt;
    return std::string_view(manifest_[next_].name);
  }

  void write(std::string_view name, std::span<const float> values) {
    if (next_ >= manifest_.size()) throw FormatError("container already holds every manifest tensor");
    const auto& meta = manifest_[next_];
    if (meta.name != name) {
      throw FormatError("tensors must be written in manifest order: expected '" + meta.name + "', got '" +
                        std::string(name) + "'");
    }
    if (values.size() != meta.numel()) {
      throw ShapeError("tensor '" + meta.name + "' expects " + std::to_string(meta.numel()) + " values, got " +
                       std::to_string(values.size()));
    }
    if (options_.strict_finite) {
      for (float v : values) {
        if (!std::isfinite(v)) throw NumericError("non-finite value in tensor '" + meta.name + "'");
      }
    }
    detail::floats_to_le(values, buffer_);
    out_.write(buffer_.data(), static_cast<std::streamsize>(buffer_.size()));
    check_stream();
    ++next_;
  }

  void finish() {
    if (finished_) return;
    if (next_ != manifest_.size()) {
      throw FormatError("container incomplete: tensor '" + manifest_[next_].name + "' was never written");
    }
    out_.flush();
    check_stream();
    out_.close();
    std::error_code ec;
    std::filesystem::rename(partial_, path_, ec);
    if (ec) throw IoError("cannot move '" + partial_.string() + "' to '" + path_.string() + "': " + ec.message());
    finished_ = true;
  }

 private:
  void check_stream() {
    if (!out_) throw IoError("write to '" + partial_.string() + "' failed");
  }

  std::filesystem::path path_;
  std::filesystem::path partial_;
  WriteOptions options_;
  std::vector<TensorMeta> manifest_;
  std::ofstream out_;
  std::vector<char> buffer_;
  std::size_t next_ = 0;
  bool finished_ = false;
};

inline void write_container(const TensorMap& map, const std::filesystem::path& path, WriteOptions options = {}) {
  if (map.empty()) throw FormatError("cannot write an empty container");
  std::vector<TensorSpec> specs;
  specs.reserve(map.size());
  for (const auto& [name, tensor] : map) specs.push_back({name, tensor.shape});
  ContainerWriter writer(path, std::move(specs), options);
  for (const auto& [name, tensor] : map) writer.write(name, tensor.values);
  writer.finish();
}

// Random access to the tensors of one container. Each reader owns its own file
// handle; separate readers over the same file may be used concurrently.
class ContainerReader {
 public:
  explicit ContainerReader(std::filesystem::path path) : path_(std::move(path)) {
    in_.open(path_, std::ios::binary);
    if (!in_) throw IoError("cannot open '" + path_.string() + "'");
    std::error_code ec;
    const auto file_size = std::filesystem::file_size(path_, ec);
    if (ec) throw IoError("cannot stat '" + path_.string() + "': " + ec.message());
    if (file_size < 8) throw FormatError("'" + path_.string() + "': file too short for a manifest header");
    char header[8];
    in_.read(header, 8);
    const auto manifest_len = detail::load_u64_le(header);
    if (manifest_len > file_size - 8) throw FormatError("'" + path_.string() + "': manifest length exceeds file size");
    std::string json(manifest_len, '\0');
    in_.read(json.data(), static_cast<std::streamsize>(manifest_len));
    if (!in_) throw IoError("cannot read manifest of '" + path_.string() + "'");
    nlohmann::json parsed;
    try {
      parsed = nlohmann::json::parse(json);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("'" + path_.string() + "': malformed manifest: " + e.what());
    }
    manifest_ = detail::manifest_from_json(parsed);
    if (manifest_.empty()) throw FormatError("empty container");
    payload_start_ = 8 + manifest_len;
    std::uint64_t expected = 0;
    for (std::size_t i = 0; i < manifest_.size(); ++i) {
      const auto& meta = manifest_[i];
      if (i > 0 && !(manifest_[i - 1].name < meta.name)) {
        throw FormatError("malformed manifest: tensor names must be unique and sorted ('" + manifest_[i - 1].name +
                          "' before '" + meta.name + "')");
      }
      if (meta.offset != expected) {
        throw FormatError("malformed manifest: tensor '" + meta.name + "' is not packed at offset " +
                          std::to_string(expected));
      }
      expected += meta.byte_size();
    }
    if (file_size - payload_start_ != expected) {
      throw FormatError("payload length mismatch in '" + path_.string() + "': manifest needs " +
                        std::to_string(expected) + " bytes, file has " + std::to_string(file_size - payload_start_));
    }
  }

  const std::filesystem::path& path() const { return path_; }
  const std::vector<TensorMeta>& manifest() const { return manifest_; }
  std::size_t size() const { return manifest_.size(); }

  std::optional<std::size_t> find(std::string_view name) const {
    auto it = std::lower_bound(manifest_.begin(), manifest_.end(), name,
                               [](const TensorMeta& m, std::string_view n) { return m.name < n; });
    if (it == manifest_.end() || it->name != name) return std::nullopt;
    return static_cast<std::size_t>(it - manifest_.begin());
  }

  bool contains(std::string_view name) const { return find(name).has_value(); }

  Tensor read(std::size_t index) {
    const auto& meta = manifest_.at(index);
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(payload_start_ + meta.offset));
    buffer_.resize(meta.byte_size());
    in_.read(buffer_.data(), static_cast<std::streamsize>(buffer_.size()));
    if (!in_) throw IoError("cannot read tensor '" + meta.name + "' from '" + path_.string() + "'");
    std::vector<float> values;
    detail::le_to_floats(buffer_, values);
    return Tensor(meta.shape, std::move(values));
  }

  Tensor read(std::string_view name) {
    auto index = find(name);
    if (!index) throw FormatError("tensor '" + std::string(name) + "' not found in '" + path_.string() + "'");
    return read(*index);
  }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::vector<TensorMeta> manifest_;
  std::uint64_t payload_start_ = 0;
  std::vector<char> buffer_;
};

inline TensorMap read_container(const std::filesystem::path& path) {
  ContainerReader reader(path);
  TensorMap map;
  for (std::size_t i = 0; i < reader.size(); ++i) map.emplace(reader.manifest()[i].name, reader.read(i));
  return map;
}

// Throws ShapeError naming the first tensor where `other` disagrees with `reference`.
inline void require_same_manifest(const std::vector<TensorMeta>& reference, const std::vector<TensorMeta>& other,
                                  const std::string& other_label) {
  std::size_t i = 0;
  std::size_t j = 0;
  while (i < reference.size() || j < other.size()) {
    if (j >= other.size() || (i < reference.size() && reference[i].name < other[j].name)) {
      throw ShapeError("manifest mismatch: tensor '" + reference[i].name + "' missing from " + other_label);
    }
    if (i >= reference.size() || other[j].name < reference[i].name) {
      throw ShapeError("manifest mismatch: unexpected tensor '" + other[j].name + "' in " + other_label);
    }
    if (reference[i].shape != other[j].shape) {
      throw ShapeError("manifest mismatch: tensor '" + reference[i].name + "' has shape " +
                       shape_to_string(other[j].shape) + " in " + other_label + ", expected " +
                       shape_to_string(reference[i].shape));
    }
    ++i;
    ++j;
  }
}

struct Block {
  std::string name;
  std::vector<Tensor> tensors;  // one per container, in the order given
};

// Yields, for every tensor name in manifest order, the aligned tensors from each
// container. Holds at most one tensor per container at a time.
class BlockStream {
 public:
  explicit BlockStream(std::span<const std::filesystem::path> paths) {
    if (paths.empty()) throw ConfigError("stream_blocks needs at least one container");
    readers_.reserve(paths.size());
    for (const auto& p : paths) readers_.emplace_back(p);
    for (std::size_t i = 1; i < readers_.size(); ++i) {
      require_same_manifest(readers_.front().manifest(), readers_[i].manifest(), "'" + paths[i].string() + "'");
    }
  }

  const std::vector<TensorMeta>& manifest() const { return readers_.front().manifest(); }
  std::size_t position() const { return position_; }
  std::size_t container_count() const { return readers_.size(); }

  std::optional<Block> next() {
    if (position_ >= manifest().size()) return std::nullopt;
    Block block{manifest()[position_].name, {}};
    block.tensors.reserve(readers_.size());
    for (auto& reader : readers_) block.tensors.push_back(reader.read(position_));
    ++position_;
    return block;
  }

 private:
  std::vector<ContainerReader> readers_;
  std::size_t position_ = 0;
};

inline BlockStream stream_blocks(std::span<const std::filesystem::path> paths) { return BlockStream(paths); }

}  // namespace mergebench

#endif  // MERGEBENCH_CHECKPOINT_HPP
