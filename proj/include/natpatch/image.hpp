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

#include <cstdint>
#include <filesystem>
#include <vector>

#include "natpatch/autograd.hpp"

namespace natpatch {

// H x W x C raster, row-major with interleaved channels. Values live in [0,1]
// for anything that is shown to a model.
struct Image {
  int64_t height = 0;
  int64_t width = 0;
  int64_t channels = 3;
  std::vector<double> pixels;

  Image() = default;
  Image(int64_t h, int64_t w, int64_t c = 3, double fill = 0.0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  double& at(int64_t row, int64_t col, int64_t ch) {
    return pixels[(row * width + col) * channels + ch];
  }
  double at(int64_t row, int64_t col, int64_t ch) const {
    return pixels[(row * width + col) * channels + ch];
  }
  bool operator==(const Image&) const = default;
};

// A patch is a square image; the alias documents intent at call sites.
using Patch = Image;

ad::Tensor to_tensor(const Image& image);
Image from_tensor(const ad::Tensor& tensor);

// Area-averaging resize; exact for integer down-scaling factors.
Image resize_area(const Image& image, int64_t height, int64_t width);

// Binary PPM (P6), 8-bit. Values are clamped to [0,1] and rounded on export.
void write_ppm(const Image& image, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

}  // namespace natpatch
