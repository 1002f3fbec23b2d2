#include "deltagan/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace deltagan {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

ImageU8 read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open image: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("libpng: read struct allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("libpng: info struct allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("undecodable image: " + path);
  }

  png_init_io(png, fp.get());
  png_read_info(png, info);

  // Normalize everything to 8-bit RGB.
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  ImageU8 img;
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);

  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y)
    rows[static_cast<std::size_t>(y)] = img.rgb.data() + static_cast<std::size_t>(y) * img.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const std::string& path, const ImageU8& img) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot write image: " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("libpng: write struct allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("libpng: info struct allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png write failed: " + path);
  }

  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
               static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y)
    rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(
        img.rgb.data() + static_cast<std::size_t>(y) * img.width * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

ImageU8 resize(const ImageU8& img, int size) {
  if (img.width == size && img.height == size) return img;
  ImageU8 out;
  out.width = size;
  out.height = size;
  out.rgb.resize(static_cast<std::size_t>(size) * size * 3);
  const double sx = static_cast<double>(img.width) / size;
  const double sy = static_cast<double>(img.height) / size;
  for (int y = 0; y < size; ++y) {
    const double fy = (y + 0.5) * sy - 0.5;
    const int y0 = std::max(0, std::min(img.height - 1, static_cast<int>(std::floor(fy))));
    const int y1 = std::min(img.height - 1, y0 + 1);
    const double wy = std::max(0.0, std::min(1.0, fy - y0));
    for (int x = 0; x < size; ++x) {
      const double fx = (x + 0.5) * sx - 0.5;
      const int x0 = std::max(0, std::min(img.width - 1, static_cast<int>(std::floor(fx))));
      const int x1 = std::min(img.width - 1, x0 + 1);
      const double wx = std::max(0.0, std::min(1.0, fx - x0));
      for (int c = 0; c < 3; ++c) {
        const double top = img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx;
        const double bot = img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx;
        out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(top * (1 - wy) + bot * wy));
      }
    }
  }
  return out;
}

Tensor<float> to_float_chw(const ImageU8& img, int size) {
  ImageU8 scaled;
  const ImageU8* use = &img;
  if (img.width != size || img.height != size) {
    scaled = resize(img, size);
    use = &scaled;
  }
  Tensor<float> out({3, size, size});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        out[(static_cast<std::size_t>(c) * size + y) * size + x] =
            static_cast<float>(use->at(y, x, c)) / 255.0f * 2.0f - 1.0f;
  return out;
}

ImageU8 from_float_chw(const Tensor<float>& chw) {
  if (chw.ndim() != 3 || chw.dim(0) != 3)
    throw std::invalid_argument("from_float_chw: expected (3, H, W)");
  ImageU8 img;
  img.height = chw.dim(1);
  img.width = chw.dim(2);
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        float v = chw[(static_cast<std::size_t>(c) * img.height + y) * img.width + x];
        v = std::min(1.0f, std::max(-1.0f, v));
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround((v + 1.0f) * 0.5f * 255.0f));
      }
  return img;
}

ImageU8 tile_grid(const std::vector<ImageU8>& images, int columns) {
  if (images.empty()) throw std::invalid_argument("tile_grid: no images");
  if (columns < 1) throw std::invalid_argument("tile_grid: columns must be positive");
  const int w = images[0].width, h = images[0].height;
  for (const auto& im : images)
    if (im.width != w || im.height != h)
      throw std::invalid_argument("tile_grid: mixed image sizes");
  const int rows = (static_cast<int>(images.size()) + columns - 1) / columns;
  ImageU8 grid;
  grid.width = columns * w;
  grid.height = rows * h;
  grid.rgb.assign(static_cast<std::size_t>(grid.width) * grid.height * 3, 0);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const int r = static_cast<int>(i) / columns, c = static_cast<int>(i) % columns;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < 3; ++ch)
          grid.at(r * h + y, c * w + x, ch) = images[i].at(y, x, ch);
  }
  return grid;
}

}  // namespace deltagan
