#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include "mcm/config.hpp"

MCM_BEGIN_NAMESPACE

// Interleaved H x W x C image with values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> pixels;

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

// Binary NetPBM: P6 (RGB) or P5 (gray), maxval up to 255.
Image read_pnm(const std::filesystem::path& path);
// Writes P6 for 3 channels and P5 for 1; values are clamped and rounded to 8 bits.
void write_pnm(const std::filesystem::path& path, const Image& image);

Image resize_bilinear(const Image& image, std::size_t height, std::size_t width);
// Largest centered crop with the target aspect ratio, then a bilinear resize.
Image center_crop_resize(const Image& image, std::size_t height, std::size_t width);
// 1 -> 3 channels by replication, 3 -> 1 by luma.
Image convert_channels(const Image& image, std::size_t channels);

MCM_END_NAMESPACE
