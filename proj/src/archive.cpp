// Copyright 2026 The natpatch Authors.
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

#include "natpatch/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace natpatch {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes little-endian");

namespace {

constexpr char kMagic[8] = {'N', 'P', 'A', 'R', 'C', 'H', '0', '1'};

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get_pod(std::istream& in, const std::string& where) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("truncated archive while reading " + where);
  return value;
}

std::string get_bytes(std::istream& in, uint64_t n, const std::string& where) {
  if (n > (uint64_t{1} << 32)) throw std::runtime_error("implausible length for " + where);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("truncated archive while reading " + where);
  return s;
}

}  // namespace

const ad::Tensor& Archive::get(const std::string& name, const ad::Shape& shape) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw std::runtime_error("archive has no tensor '" + name + "'");
  if (it->second.shape() != shape) {
    throw std::runtime_error("tensor '" + name + "' has shape " +
                             ad::shape_string(it->second.shape()) + ", expected " +
                             ad::shape_string(shape));
  }
  return it->second;
}

void save_archive(const Archive& archive, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof(kMagic));
  const std::string desc = archive.descriptor.dump();
  put<uint64_t>(out, desc.size());
  out.write(desc.data(), static_cast<std::streamsize>(desc.size()));
  put<uint64_t>(out, archive.tensors.size());
  for (const auto& [name, tensor] : archive.tensors) {
    put<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<uint32_t>(out, static_cast<uint32_t>(tensor.rank()));
    for (int64_t d : tensor.shape()) put<int64_t>(out, d);
    auto values = tensor.values();
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing archive " + path.string());
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open archive " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error(path.string() + " is not a natpatch archive");
  }
  Archive archive;
  const auto desc_len = get_pod<uint64_t>(in, "descriptor length");
  archive.descriptor = nlohmann::json::parse(get_bytes(in, desc_len, "descriptor"));
  const auto count = get_pod<uint64_t>(in, "tensor count");
  for (uint64_t i = 0; i < count; ++i) {
    const auto name_len = get_pod<uint32_t>(in, "tensor name length");
    std::string name = get_bytes(in, name_len, "tensor name");
    const auto rank = get_pod<uint32_t>(in, name + " rank");
    if (rank > 8) throw std::runtime_error("implausible rank for " + name);
    ad::Shape shape(rank);
    for (auto& d : shape) d = get_pod<int64_t>(in, name + " dims");
    std::vector<double> values(ad::numel(shape));
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated archive while reading " + name + " values");
    archive.tensors.emplace(std::move(name), ad::Tensor::constant(shape, std::move(values)));
  }
  return archive;
}

}  // namespace natpatch
