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

#include "natpatch/placement.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace natpatch::placement {

bool Placement::valid() const {
  return patch_side >= 1 && top() >= 0 && left() >= 0 && top() + patch_side <= image_height &&
         left() + patch_side <= image_width;
}

nlohmann::json Placement::to_json() const {
  return {{"center_row", center_row}, {"center_col", center_col}, {"patch_side", patch_side}};
}

int64_t Mask::count() const {
  int64_t n = 0;
  for (auto c : cells) n += c;
  return n;
}

Raster upsample_map(const surrogate::AttentionMap& map, int64_t image_height, int64_t image_width) {
  const int64_t g = map.grid;
  if (g < 1 || static_cast<int64_t>(map.raw.size()) != g * g) {
    throw std::invalid_argument("attention map must be g x g with g >= 1");
  }
  if (image_height <= 0 || image_width <= 0) {
    throw std::invalid_argument("upsample target dimensions must be positive");
  }
  if (image_height < g || image_width < g) {
    throw std::invalid_argument("upsample target is smaller than the attention grid");
  }
  Raster out{image_height, image_width, std::vector<double>(image_height * image_width)};
  // Output pixel 0 maps onto map cell 0 and the last pixel onto cell g-1.
  auto coord = [g](int64_t i, int64_t n) {
    return n == 1 || g == 1 ? 0.0 : static_cast<double>(i) * (g - 1) / static_cast<double>(n - 1);
  };
  for (int64_t r = 0; r < image_height; ++r) {
    const double y = coord(r, image_height);
    const int64_t y0 = std::min<int64_t>(static_cast<int64_t>(std::floor(y)), g - 1);
    const int64_t y1 = std::min<int64_t>(y0 + 1, g - 1);
    const double fy = y - y0;
    for (int64_t c = 0; c < image_width; ++c) {
      const double x = coord(c, image_width);
      const int64_t x0 = std::min<int64_t>(static_cast<int64_t>(std::floor(x)), g - 1);
      const int64_t x1 = std::min<int64_t>(x0 + 1, g - 1);
      const double fx = x - x0;
      const double top = (1.0 - fx) * map.raw[y0 * g + x0] + fx * map.raw[y0 * g + x1];
      const double bottom = (1.0 - fx) * map.raw[y1 * g + x0] + fx * map.raw[y1 * g + x1];
      out.values[r * image_width + c] = (1.0 - fy) * top + fy * bottom;
    }
  }
  return out;
}

namespace {

int64_t clamp_center(int64_t center, int64_t side, int64_t extent) {
  const int64_t lo = side / 2;
  const int64_t hi = extent - side + side / 2;
  return std::clamp(center, lo, hi);
}

void check_fits(int64_t patch_side, int64_t h, int64_t w) {
  if (patch_side < 1) throw std::invalid_argument("patch side must be at least 1");
  if (patch_side > std::min(h, w)) {
    throw std::invalid_argument("patch of side " + std::to_string(patch_side) +
                                " does not fit a " + std::to_string(h) + "x" + std::to_string(w) +
                                " image");
  }
}

}  // namespace

Placement select_center(const Raster& raster, int64_t patch_side) {
  check_fits(patch_side, raster.height, raster.width);
  int64_t best = 0;
  for (int64_t i = 1; i < static_cast<int64_t>(raster.values.size()); ++i) {
    if (raster.values[i] > raster.values[best]) best = i;
  }
  Placement p;
  p.patch_side = patch_side;
  p.image_height = raster.height;
  p.image_width = raster.width;
  p.center_row = clamp_center(best / raster.width, patch_side, raster.height);
  p.center_col = clamp_center(best % raster.width, patch_side, raster.width);
  return p;
}

Placement random_placement(int64_t image_height, int64_t image_width, int64_t patch_side,
                           std::mt19937_64& rng) {
  check_fits(patch_side, image_height, image_width);
  std::uniform_int_distribution<int64_t> top(0, image_height - patch_side);
  std::uniform_int_distribution<int64_t> left(0, image_width - patch_side);
  Placement p;
  p.patch_side = patch_side;
  p.image_height = image_height;
  p.image_width = image_width;
  p.center_row = top(rng) + patch_side / 2;
  p.center_col = left(rng) + patch_side / 2;
  return p;
}

int64_t patch_side_for(double ratio, int64_t image_height, int64_t image_width) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("patch ratio must be in (0,1]");
  const auto side = static_cast<int64_t>(std::lround(ratio * std::min(image_height, image_width)));
  return std::max<int64_t>(side, 1);
}

Mask make_mask(const Placement& placement) {
  if (!placement.valid()) throw std::invalid_argument("placement does not fit inside the image");
  Mask m{placement.image_height, placement.image_width,
         std::vector<uint8_t>(placement.image_height * placement.image_width, 0)};
  for (int64_t r = placement.top(); r < placement.top() + placement.patch_side; ++r)
    for (int64_t c = placement.left(); c < placement.left() + placement.patch_side; ++c)
      m.cells[r * m.width + c] = 1;
  return m;
}

namespace {

void check_consistent(const Mask& mask, const Placement& placement, int64_t h, int64_t w,
                      int64_t patch_h, int64_t patch_w) {
  if (mask.height != h || mask.width != w || placement.image_height != h ||
      placement.image_width != w) {
    throw std::invalid_argument("mask, placement and image sizes disagree");
  }
  if (patch_h != placement.patch_side || patch_w != placement.patch_side) {
    throw std::invalid_argument("patch side does not match the placement");
  }
  // An all-zero mask applies no patch and is always accepted.
  if (mask.count() != 0 && mask.cells != make_mask(placement).cells) {
    throw std::invalid_argument("mask is inconsistent with the placement");
  }
}

}  // namespace

ad::Tensor compose(const ad::Tensor& image, const ad::Tensor& patch, const Mask& mask,
                   const Placement& placement) {
  if (image.rank() != 3 || patch.rank() != 3 || image.dim(2) != patch.dim(2)) {
    throw std::invalid_argument("compose expects [H,W,C] image and [s,s,C] patch");
  }
  const int64_t h = image.dim(0), w = image.dim(1), ch = image.dim(2);
  check_consistent(mask, placement, h, w, patch.dim(0), patch.dim(1));
  // Scatter the patch onto an image-sized canvas, then select per pixel.
  std::vector<int64_t> index(h * w * ch, -1);
  std::vector<uint8_t> select(h * w * ch, 0);
  const int64_t s = placement.patch_side;
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c) {
      if (!mask.cells[r * w + c]) continue;
      const int64_t pr = r - placement.top(), pc = c - placement.left();
      for (int64_t k = 0; k < ch; ++k) {
        index[(r * w + c) * ch + k] = (pr * s + pc) * ch + k;
        select[(r * w + c) * ch + k] = 1;
      }
    }
  auto canvas = ad::gather(patch, std::move(index), image.shape());
  return ad::where(select, canvas, image);
}

Image compose(const Image& image, const Patch& patch, const Mask& mask, const Placement& placement) {
  return from_tensor(compose(to_tensor(image), to_tensor(patch), mask, placement));
}

}  // namespace natpatch::placement
