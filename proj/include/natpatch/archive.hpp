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

#pragma once

// Self-describing weight archive.
//
// Layout (all integers little-endian):
//   8 bytes   magic "NPARCH01"
//   u64       descriptor length, then that many bytes of UTF-8 JSON
//   u64       tensor count
//   per tensor:
//     u32 name length, name bytes
//     u32 rank, rank x i64 dims
//     numel x f64 values

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "natpatch/autograd.hpp"

namespace natpatch {

struct Archive {
  nlohmann::json descriptor;
  std::map<std::string, ad::Tensor> tensors;

  // Throws if the tensor is missing or its shape differs.
  const ad::Tensor& get(const std::string& name, const ad::Shape& shape) const;
};

void save_archive(const Archive& archive, const std::filesystem::path& path);
Archive load_archive(const std::filesystem::path& path);

}  // namespace natpatch
