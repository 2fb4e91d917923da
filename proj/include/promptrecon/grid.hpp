#pragma once

#include <cstddef>
#include <vector>

#include "promptrecon/errors.hpp"

namespace promptrecon {

/// Row-major H x W x C raster with interleaved channels.
template <typename T>
struct Grid {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<T> data;

  Grid() = default;
  Grid(int h, int w, int c = 1, T fill = T{})
      : height(h), width(w), channels(c),
        data(static_cast<std::size_t>(h) * w * c, fill) {
    if (h < 0 || w < 0 || c < 1) throw ShapeError("Grid: negative extent");
  }

  std::size_t index(int row, int col, int ch = 0) const {
    return (static_cast<std::size_t>(row) * width + col) * channels + ch;
  }
  T& at(int row, int col, int ch = 0) { return data[index(row, col, ch)]; }
  const T& at(int row, int col, int ch = 0) const { return data[index(row, col, ch)]; }

  std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }
  bool empty() const { return data.empty(); }
  bool same_extent(int h, int w) const { return height == h && width == w; }

  bool operator==(const Grid&) const = default;
};

using Mask = Grid<unsigned char>;

}  // namespace promptrecon
