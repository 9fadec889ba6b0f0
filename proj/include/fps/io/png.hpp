#pragma once

// 8-bit grayscale PNG output through libpng. Callers must link PNG::PNG.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <span>
#include <vector>

#include "fps/io/fpt1.hpp"

namespace fps {

struct PngRange {
  double lo = 0.0, hi = 0.0;
};

/// Min-max normalizes `values` (h x w) to 0..255 and writes a grayscale PNG.
/// Returns the range used; a constant image maps to 0.
inline PngRange write_png(const std::filesystem::path& path, std::span<const double> values, int h, int w) {
  if (values.size() != static_cast<std::size_t>(h) * w) throw std::invalid_argument("write_png: extents do not match data");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const PngRange range{*lo_it, *hi_it};
  const double span = range.hi - range.lo;
  std::vector<unsigned char> px(values.size());
  for (std::size_t i = 0; i < values.size(); ++i)
    px[i] = span > 0 ? static_cast<unsigned char>(std::lround(255.0 * (values[i] - range.lo) / span)) : 0;

  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, px.data(), w, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot write " + path.string() + ": " + msg);
  }
  return range;
}

}  // namespace fps
