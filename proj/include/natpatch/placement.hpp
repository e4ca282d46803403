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
#include <random>
#include <vector>

#include <json.hpp>

#include "natpatch/autograd.hpp"
#include "natpatch/image.hpp"
#include "natpatch/surrogate.hpp"

namespace natpatch::placement {

// The square occupies rows [top(), top() + patch_side) and the matching
// columns. For even sides the center is the lower-right of the middle four.
struct Placement {
  int64_t center_row = 0;
  int64_t center_col = 0;
  int64_t patch_side = 1;
  int64_t image_height = 0;
  int64_t image_width = 0;

  int64_t top() const { return center_row - patch_side / 2; }
  int64_t left() const { return center_col - patch_side / 2; }
  bool valid() const;
  bool operator==(const Placement&) const = default;

  nlohmann::json to_json() const;
};

struct Mask {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<uint8_t> cells;  // H x W, row-major

  int64_t count() const;
};

// Real-valued H x W raster.
struct Raster {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<double> values;

  double at(int64_t r, int64_t c) const { return values[r * width + c]; }
};

// Corner-aligned bilinear upsampling of a g x g map.
Raster upsample_map(const surrogate::AttentionMap& map, int64_t image_height, int64_t image_width);

// Row-major first argmax, then the center is clamped so the patch fits.
Placement select_center(const Raster& raster, int64_t patch_side);

// Uniform over all centers whose square fits inside the image.
Placement random_placement(int64_t image_height, int64_t image_width, int64_t patch_side,
                           std::mt19937_64& rng);

// round(ratio * min(H, W)), at least 1.
int64_t patch_side_for(double ratio, int64_t image_height, int64_t image_width);

Mask make_mask(const Placement& placement);

// (1 - m) * image + m * patch, differentiable with respect to both inputs.
// image: [H,W,C], patch: [s,s,C]. The mask is make_mask(placement) or all
// zeros.
ad::Tensor compose(const ad::Tensor& image, const ad::Tensor& patch, const Mask& mask,
                   const Placement& placement);
Image compose(const Image& image, const Patch& patch, const Mask& mask, const Placement& placement);

}  // namespace natpatch::placement
