#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace semnerf {

/// Interleaved float image, row-major, values nominally in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c = 3, float fill = 0.0f)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  float& at(int row, int col, int ch = 0) {
    return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }
  float at(int row, int col, int ch = 0) const {
    return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }
  std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }
  bool empty() const { return data.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

/// 8-bit single-channel grid; used for label maps and 8-bit maps such as contours.
struct ByteGrid {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  ByteGrid() = default;
  ByteGrid(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int row, int col) { return data[static_cast<std::size_t>(row) * width + col]; }
  std::uint8_t at(int row, int col) const { return data[static_cast<std::size_t>(row) * width + col]; }

  friend bool operator==(const ByteGrid&, const ByteGrid&) = default;
};

/// Quantizes to 8 bits with rounding; values are clamped to [0, 1].
std::vector<std::uint8_t> to_bytes(const Image& image);
Image from_bytes(int height, int width, int channels, const std::vector<std::uint8_t>& bytes);

/// Lossless PNG I/O (8-bit gray or RGB).
void write_png(const std::filesystem::path& path, const Image& image);
void write_png(const std::filesystem::path& path, const ByteGrid& grid);
std::vector<std::uint8_t> encode_png(const Image& image);
std::vector<std::uint8_t> encode_png(const ByteGrid& grid);
Image read_png_rgb(const std::filesystem::path& path);
ByteGrid read_png_gray(const std::filesystem::path& path);
ByteGrid decode_png_gray(const std::vector<std::uint8_t>& bytes);
Image decode_png_rgb(const std::vector<std::uint8_t>& bytes);

/// Peak signal-to-noise ratio for images in [0, 1].
double psnr(const Image& a, const Image& b);

}  // namespace semnerf
