// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "shadowtune/container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace shadowtune {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'S', 'H', 'T', 'N'};

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::kF32:
    case DType::kI32:
      return 4;
    case DType::kF64:
      return 8;
  }
  throw IoError("unknown dtype tag");
}

template <typename V>
void put_raw(std::vector<std::uint8_t>& out, V v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(V));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename V>
  V read() {
    V v;
    std::memcpy(&v, take(sizeof(V)), sizeof(V));
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw IoError("container truncated");
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

template <typename T>
ArchiveEntry make_entry(const std::string& name, DType dtype, const Shape& shape, std::span<const T> data) {
  ArchiveEntry e{name, dtype, shape, {}};
  e.bytes.resize(data.size() * sizeof(T));
  if (!data.empty()) std::memcpy(e.bytes.data(), data.data(), e.bytes.size());
  return e;
}

}  // namespace

void TensorArchive::insert(ArchiveEntry entry) {
  if (contains(entry.name)) throw IoError("duplicate archive entry '" + entry.name + "'");
  entries_.push_back(std::move(entry));
}

void TensorArchive::put(const std::string& name, const Tensor& t) {
  insert(make_entry<float>(name, DType::kF32, t.shape(), t.data()));
}

void TensorArchive::put(const std::string& name, const BasicTensor<double>& t) {
  insert(make_entry<double>(name, DType::kF64, t.shape(), t.data()));
}

void TensorArchive::put_ints(const std::string& name, const std::vector<std::int32_t>& values) {
  insert(make_entry<std::int32_t>(name, DType::kI32, {values.size()}, values));
}

bool TensorArchive::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const ArchiveEntry& e) { return e.name == name; });
}

const ArchiveEntry& TensorArchive::find(const std::string& name, DType dtype) const {
  for (const auto& e : entries_) {
    if (e.name != name) continue;
    if (e.dtype != dtype) throw IoError("archive entry '" + name + "' has an unexpected dtype");
    return e;
  }
  throw IoError("archive has no entry '" + name + "'");
}

Tensor TensorArchive::get(const std::string& name) const {
  const auto& e = find(name, DType::kF32);
  std::vector<float> data(e.bytes.size() / sizeof(float));
  std::memcpy(data.data(), e.bytes.data(), e.bytes.size());
  return Tensor(e.shape, std::move(data));
}

BasicTensor<double> TensorArchive::get_f64(const std::string& name) const {
  const auto& e = find(name, DType::kF64);
  std::vector<double> data(e.bytes.size() / sizeof(double));
  std::memcpy(data.data(), e.bytes.data(), e.bytes.size());
  return BasicTensor<double>(e.shape, std::move(data));
}

std::vector<std::int32_t> TensorArchive::get_ints(const std::string& name) const {
  const auto& e = find(name, DType::kI32);
  std::vector<std::int32_t> data(e.bytes.size() / sizeof(std::int32_t));
  std::memcpy(data.data(), e.bytes.data(), e.bytes.size());
  return data;
}

std::vector<std::uint8_t> TensorArchive::serialize() const {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_raw(out, kVersion);
  put_raw(out, static_cast<std::uint64_t>(metadata.size()));
  out.insert(out.end(), metadata.begin(), metadata.end());
  put_raw(out, static_cast<std::uint64_t>(entries_.size()));
  for (const auto& e : entries_) {
    put_raw(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_raw(out, static_cast<std::uint8_t>(e.dtype));
    put_raw(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) put_raw(out, static_cast<std::uint64_t>(d));
    out.insert(out.end(), e.bytes.begin(), e.bytes.end());
  }
  return out;
}

TensorArchive TensorArchive::deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader in(bytes);
  if (std::memcmp(in.take(4), kMagic, 4) != 0) throw IoError("not a tensor container (bad magic)");
  const auto version = in.read<std::uint32_t>();
  if (version != kVersion) throw IoError("unsupported container version " + std::to_string(version));
  TensorArchive a;
  const auto meta_len = in.read<std::uint64_t>();
  const auto* meta = in.take(meta_len);
  a.metadata.assign(reinterpret_cast<const char*>(meta), meta_len);
  const auto count = in.read<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    ArchiveEntry e;
    const auto name_len = in.read<std::uint32_t>();
    e.name.assign(reinterpret_cast<const char*>(in.take(name_len)), name_len);
    e.dtype = static_cast<DType>(in.read<std::uint8_t>());
    const auto rank = in.read<std::uint32_t>();
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      e.shape.push_back(static_cast<std::size_t>(in.read<std::uint64_t>()));
      n *= e.shape.back();
    }
    const std::size_t payload = n * dtype_size(e.dtype);
    const auto* p = in.take(payload);
    e.bytes.assign(p, p + payload);
    a.insert(std::move(e));
  }
  if (!in.done()) throw IoError("trailing bytes after container entries");
  return a;
}

void TensorArchive::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write to '" + path.string() + "' failed");
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace shadowtune
