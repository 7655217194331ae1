#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace argd {

/// 8-bit PNG, channels 1 (gray) or 3 (RGB), pixels interleaved row by row.
void write_png(const std::filesystem::path& path, int width, int height, int channels,
               std::span<const std::uint8_t> pixels);

struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

PngImage read_png(const std::filesystem::path& path);

/// Planar (C, H, W) to interleaved (H, W, C).
std::vector<std::uint8_t> interleave(std::span<const std::uint8_t> planar, int channels, int height, int width);

/// Maps v in [0, 1] to an RGB heat colour (black, red, yellow, white).
void heat_color(double v, std::uint8_t rgb[3]);

}  // namespace argd
