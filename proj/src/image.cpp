#include "semnerf/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "semnerf/errors.hpp"

namespace semnerf {

std::vector<std::uint8_t> to_bytes(const Image& image) {
  std::vector<std::uint8_t> out(image.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float v = std::clamp(image.data[i], 0.0f, 1.0f);
    out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return out;
}

Image from_bytes(int height, int width, int channels, const std::vector<std::uint8_t>& bytes) {
  require(bytes.size() == static_cast<std::size_t>(height) * width * channels, ErrorKind::kData,
          "image: byte count does not match dimensions");
  Image out(height, width, channels);
  for (std::size_t i = 0; i < bytes.size(); ++i) out.data[i] = bytes[i] / 255.0f;
  return out;
}

namespace {

std::vector<std::uint8_t> encode(int height, int width, int channels, const std::uint8_t* pixels) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  require(png_image_write_to_memory(&img, nullptr, &size, 0, pixels, 0, nullptr) != 0, ErrorKind::kIo,
          std::string("png encode failed: ") + img.message);
  std::vector<std::uint8_t> out(size);
  require(png_image_write_to_memory(&img, out.data(), &size, 0, pixels, 0, nullptr) != 0,
          ErrorKind::kIo, std::string("png encode failed: ") + img.message);
  out.resize(size);
  return out;
}

std::vector<std::uint8_t> decode(const std::vector<std::uint8_t>& bytes, png_uint_32 format,
                                 int& height, int& width, const std::string& what) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()) == 0) {
    fail(ErrorKind::kIo, "corrupt png " + what + ": " + img.message);
  }
  img.format = format;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(img));
  if (png_image_finish_read(&img, nullptr, pixels.data(), 0, nullptr) == 0) {
    png_image_free(&img);
    fail(ErrorKind::kIo, "corrupt png " + what + ": " + img.message);
  }
  height = static_cast<int>(img.height);
  width = static_cast<int>(img.width);
  return pixels;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::kIo, "short write to " + path.string());
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& image) {
  require(image.channels == 1 || image.channels == 3, ErrorKind::kInput,
          "png: only gray or RGB images are supported");
  const auto bytes = to_bytes(image);
  return encode(image.height, image.width, image.channels, bytes.data());
}

std::vector<std::uint8_t> encode_png(const ByteGrid& grid) {
  return encode(grid.height, grid.width, 1, grid.data.data());
}

void write_png(const std::filesystem::path& path, const Image& image) {
  write_file(path, encode_png(image));
}

void write_png(const std::filesystem::path& path, const ByteGrid& grid) {
  write_file(path, encode_png(grid));
}

Image decode_png_rgb(const std::vector<std::uint8_t>& bytes) {
  int h = 0, w = 0;
  auto pixels = decode(bytes, PNG_FORMAT_RGB, h, w, "image");
  return from_bytes(h, w, 3, pixels);
}

ByteGrid decode_png_gray(const std::vector<std::uint8_t>& bytes) {
  int h = 0, w = 0;
  auto pixels = decode(bytes, PNG_FORMAT_GRAY, h, w, "mask");
  ByteGrid grid;
  grid.height = h;
  grid.width = w;
  grid.data = std::move(pixels);
  return grid;
}

Image read_png_rgb(const std::filesystem::path& path) {
  try {
    return decode_png_rgb(read_file(path));
  } catch (const Error& e) {
    fail(ErrorKind::kIo, path.string() + ": " + e.what());
  }
}

ByteGrid read_png_gray(const std::filesystem::path& path) {
  try {
    return decode_png_gray(read_file(path));
  } catch (const Error& e) {
    fail(ErrorKind::kIo, path.string() + ": " + e.what());
  }
}

double psnr(const Image& a, const Image& b) {
  require(a.height == b.height && a.width == b.width && a.channels == b.channels, ErrorKind::kInput,
          "psnr: image shapes differ");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.data.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace semnerf
