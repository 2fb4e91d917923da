#include "promptrecon/gridio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include <png.h>

namespace promptrecon {

namespace {

void put_u16(std::ofstream& f, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
  f.write(reinterpret_cast<const char*>(b), 2);
}

std::uint16_t get_u16(const unsigned char* b) {
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

unsigned char to_byte(float x) {
  const float c = std::clamp(x, 0.0f, 1.0f);
  return static_cast<unsigned char>(std::lround(c * 255.0f));
}

}  // namespace

void write_float_grid(const Grid<float>& grid, const std::string& path) {
  if (grid.height > 0xffff || grid.width > 0xffff || grid.channels > 0xffff) {
    throw ShapeError("float grid too large for the 16-bit header: " + path);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  put_u16(f, kFloatGridMagic);
  put_u16(f, static_cast<std::uint16_t>(grid.channels));
  put_u16(f, static_cast<std::uint16_t>(grid.height));
  put_u16(f, static_cast<std::uint16_t>(grid.width));
  static_assert(sizeof(float) == 4);
  f.write(reinterpret_cast<const char*>(grid.data.data()),
          static_cast<std::streamsize>(grid.data.size() * sizeof(float)));
  if (!f) throw DataError("short write to " + path);
}

Grid<float> read_float_grid(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("missing grid file " + path);
  unsigned char hdr[8];
  f.read(reinterpret_cast<char*>(hdr), 8);
  if (f.gcount() != 8) throw DataError("truncated grid header in " + path);
  if (get_u16(hdr) != kFloatGridMagic) throw DataError("bad grid magic in " + path);
  const int c = get_u16(hdr + 2), h = get_u16(hdr + 4), w = get_u16(hdr + 6);
  if (c < 1) throw DataError("grid with zero channels in " + path);
  Grid<float> g(h, w, c);
  f.read(reinterpret_cast<char*>(g.data.data()), static_cast<std::streamsize>(g.data.size() * sizeof(float)));
  if (static_cast<std::size_t>(f.gcount()) != g.data.size() * sizeof(float)) {
    throw DataError("truncated grid payload in " + path);
  }
  return g;
}

Grid<float> quantize_8bit(const Grid<float>& img) {
  Grid<float> out = img;
  for (auto& v : out.data) v = static_cast<float>(to_byte(v)) / 255.0f;
  return out;
}

void write_png(const Grid<float>& rgb, const std::string& path) {
  if (rgb.channels != 3) throw ShapeError("write_png expects 3 channels");
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw DataError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng failed writing " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, rgb.width, rgb.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<unsigned char> row(static_cast<std::size_t>(rgb.width) * 3);
  for (int i = 0; i < rgb.height; ++i) {
    for (int j = 0; j < rgb.width; ++j)
      for (int k = 0; k < 3; ++k) row[j * 3 + k] = to_byte(rgb.at(i, j, k));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Grid<float> read_png(const std::string& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw DataError("missing image file " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("corrupt PNG " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  Grid<float> img(h, w, 3);
  std::vector<unsigned char> row(png_get_rowbytes(png, info));
  for (int i = 0; i < h; ++i) {
    png_read_row(png, row.data(), nullptr);
    for (int j = 0; j < w; ++j)
      for (int k = 0; k < 3; ++k) img.at(i, j, k) = static_cast<float>(row[j * 3 + k]) / 255.0f;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace promptrecon
