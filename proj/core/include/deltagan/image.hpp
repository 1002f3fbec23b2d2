#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "deltagan/tensor.hpp"

namespace deltagan {

/// Interleaved 8-bit RGB image.
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // height * width * 3

  std::uint8_t& at(int y, int x, int c) {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
};

ImageU8 read_png(const std::string& path);
void write_png(const std::string& path, const ImageU8& img);

/// Bilinear resample to size x size.
ImageU8 resize(const ImageU8& img, int size);

/// 8-bit RGB -> (3, S, S) float array in [-1, 1]; resizes if needed.
Tensor<float> to_float_chw(const ImageU8& img, int size);

/// Inverse of to_float_chw at the stored size: [-1, 1] -> rounded 8-bit RGB.
ImageU8 from_float_chw(const Tensor<float>& chw);

/// Tile images left-to-right, top-to-bottom into a grid with `columns` columns.
ImageU8 tile_grid(const std::vector<ImageU8>& images, int columns);

}  // namespace deltagan
