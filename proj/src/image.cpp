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

#include "natpatch/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

namespace natpatch {

ad::Tensor to_tensor(const Image& image) {
  return ad::Tensor::constant({image.height, image.width, image.channels}, image.pixels);
}

Image from_tensor(const ad::Tensor& tensor) {
  if (tensor.rank() != 3) {
    throw std::invalid_argument("image tensor must be [H,W,C], got " +
                                ad::shape_string(tensor.shape()));
  }
  Image out(tensor.dim(0), tensor.dim(1), tensor.dim(2));
  std::copy(tensor.values().begin(), tensor.values().end(), out.pixels.begin());
  return out;
}

Image resize_area(const Image& image, int64_t height, int64_t width) {
  if (height <= 0 || width <= 0) throw std::invalid_argument("resize target must be positive");
  Image out(height, width, image.channels);
  const double sy = static_cast<double>(image.height) / height;
  const double sx = static_cast<double>(image.width) / width;
  for (int64_t r = 0; r < height; ++r) {
    const double y0 = r * sy, y1 = (r + 1) * sy;
    for (int64_t c = 0; c < width; ++c) {
      const double x0 = c * sx, x1 = (c + 1) * sx;
      for (int64_t ch = 0; ch < image.channels; ++ch) {
        double acc = 0.0, area = 0.0;
        for (auto yi = static_cast<int64_t>(std::floor(y0)); yi < y1 && yi < image.height; ++yi) {
          const double wy = std::min<double>(yi + 1, y1) - std::max<double>(yi, y0);
          for (auto xi = static_cast<int64_t>(std::floor(x0)); xi < x1 && xi < image.width;
               ++xi) {
            const double wx = std::min<double>(xi + 1, x1) - std::max<double>(xi, x0);
            acc += wy * wx * image.at(yi, xi, ch);
            area += wy * wx;
          }
        }
        out.at(r, c, ch) = acc / area;
      }
    }
  }
  return out;
}

void write_ppm(const Image& image, const std::filesystem::path& path) {
  if (image.channels != 3) throw std::invalid_argument("PPM export needs 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  std::string bytes(image.pixels.size(), '\0');
  for (size_t i = 0; i < image.pixels.size(); ++i) {
    const double v = std::clamp(image.pixels[i], 0.0, 1.0);
    bytes[i] = static_cast<char>(static_cast<uint8_t>(std::lround(v * 255.0)));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image " + path.string());
  std::string magic;
  int64_t width = 0, height = 0, maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P6" || width <= 0 || height <= 0 || maxval != 255) {
    throw std::runtime_error("unsupported image format in " + path.string());
  }
  in.get();
  std::string bytes(width * height * 3, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw std::runtime_error("truncated image " + path.string());
  }
  Image img(height, width, 3);
  for (size_t i = 0; i < bytes.size(); ++i) {
    img.pixels[i] = static_cast<uint8_t>(bytes[i]) / 255.0;
  }
  return img;
}

}  // namespace natpatch
