// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Versioned little-endian container of named tensors plus a JSON metadata
// string. Used for checkpoints, traces and predictor parameters.
//
// Layout: "SHTN" | u32 version | u64 metadata bytes | metadata |
//         u64 entry count | entries...
// Entry:  u32 name bytes | name | u8 dtype | u32 rank | u64 dims[rank] | payload

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "shadowtune/tensor.hpp"

namespace shadowtune {

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kI32 = 2 };

struct ArchiveEntry {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<std::uint8_t> bytes;
};

class TensorArchive {
 public:
  static constexpr std::uint32_t kVersion = 1;

  std::string metadata = "{}";

  void put(const std::string& name, const Tensor& t);
  void put(const std::string& name, const BasicTensor<double>& t);
  void put_ints(const std::string& name, const std::vector<std::int32_t>& values);

  bool contains(const std::string& name) const;
  /// Throws IoError when absent or stored with another dtype.
  Tensor get(const std::string& name) const;
  BasicTensor<double> get_f64(const std::string& name) const;
  std::vector<std::int32_t> get_ints(const std::string& name) const;

  const std::vector<ArchiveEntry>& entries() const { return entries_; }

  /// Serialized form; identical archives give identical bytes.
  std::vector<std::uint8_t> serialize() const;
  static TensorArchive deserialize(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path);

 private:
  const ArchiveEntry& find(const std::string& name, DType dtype) const;
  void insert(ArchiveEntry entry);

  std::vector<ArchiveEntry> entries_;
};

}  // namespace shadowtune
