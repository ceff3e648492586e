#pragma once

#include "selfctl/tokenize.hpp"

#include <filesystem>
#include <vector>

namespace selfctl {

/// 8-bit PNG, grayscale for 1 channel and RGB for 3. Values are clipped to
/// [0,1] and rounded to the nearest of 256 levels.
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

/// Tiles equally sized images into a cols-wide grid (row-major).
Image tile_images(const std::vector<Image>& images, std::size_t cols);

} // namespace selfctl
