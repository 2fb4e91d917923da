#pragma once

// On-disk raster formats.
//
// Float grid: 8-byte little-endian header
//   uint16 magic = 0x4746 ("FG"), uint16 channels, uint16 height, uint16 width
// followed by height*width*channels float32 values, row-major, channels
// interleaved.
//
// Images: 8-bit RGB PNG, values mapped from [0, 1] by round(255 * x).

#include <cstdint>
#include <string>

#include "promptrecon/grid.hpp"

namespace promptrecon {

inline constexpr std::uint16_t kFloatGridMagic = 0x4746;

void write_float_grid(const Grid<float>& grid, const std::string& path);
/// Throws DataError on a missing file, bad magic or truncated payload.
Grid<float> read_float_grid(const std::string& path);

void write_png(const Grid<float>& rgb, const std::string& path);
Grid<float> read_png(const std::string& path);

/// round(255 x) / 255, clamped to [0, 1].
Grid<float> quantize_8bit(const Grid<float>& img);

}  // namespace promptrecon
