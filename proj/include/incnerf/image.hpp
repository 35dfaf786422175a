#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "incnerf/errors.hpp"

namespace incnerf {

// Interleaved RGB, row-major, float32 per channel.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> data;

  static Image zero(int w, int h) {
    Image im;
    im.width = w;
    im.height = h;
    im.data.assign(static_cast<std::size_t>(w) * h * 3, 0.0f);
    return im;
  }

  float& at(int row, int col, int ch) {
    return data[(static_cast<std::size_t>(row) * width + col) * 3 + static_cast<std::size_t>(ch)];
  }
  float at(int row, int col, int ch) const {
    return data[(static_cast<std::size_t>(row) * width + col) * 3 + static_cast<std::size_t>(ch)];
  }

  std::size_t byte_size() const { return data.size() * sizeof(float); }

  bool operator==(const Image&) const = default;
};

// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320)
inline std::uint32_t crc32(const void* bytes, std::size_t n, std::uint32_t seed = 0) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; i++) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; k++) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = seed ^ 0xFFFFFFFFu;
  const auto* p = static_cast<const std::uint8_t*>(bytes);
  for (std::size_t i = 0; i < n; i++) c = table[(c ^ p[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

// Header-less little-endian float32 RGB file (.f32rgb). Dimensions live in
// the dataset manifest, so reads take the expected size.
inline void write_f32rgb(const std::filesystem::path& path, const Image& im) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write image: " + path.string());
  static_assert(sizeof(float) == 4);
  for (float v : im.data) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    const unsigned char b[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                                static_cast<unsigned char>(u >> 16),
                                static_cast<unsigned char>(u >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
  }
  if (!os) throw DataError("image write failed: " + path.string());
}

inline Image read_f32rgb(const std::filesystem::path& path, int width, int height) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open image: " + path.string());
  Image im = Image::zero(width, height);
  std::vector<unsigned char> raw(im.data.size() * 4);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw DataError("truncated image file: " + path.string());
  }
  char extra;
  if (is.read(&extra, 1)) throw DataError("image file larger than expected: " + path.string());
  for (std::size_t i = 0; i < im.data.size(); i++) {
    std::uint32_t u = std::uint32_t(raw[4 * i]) | (std::uint32_t(raw[4 * i + 1]) << 8) |
                      (std::uint32_t(raw[4 * i + 2]) << 16) | (std::uint32_t(raw[4 * i + 3]) << 24);
    std::memcpy(&im.data[i], &u, 4);
  }
  return im;
}

inline std::uint32_t image_crc32(const Image& im) {
  // CRC over the little-endian byte stream as stored on disk
  std::uint32_t c = 0xFFFFFFFFu;
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; i++) {
      std::uint32_t x = i;
      for (int k = 0; k < 8; k++) x = (x & 1) ? 0xEDB88320u ^ (x >> 1) : x >> 1;
      t[i] = x;
    }
    return t;
  }();
  for (float v : im.data) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    for (int k = 0; k < 4; k++) {
      const auto byte = static_cast<std::uint8_t>(u >> (8 * k));
      c = table[(c ^ byte) & 0xFFu] ^ (c >> 8);
    }
  }
  return c ^ 0xFFFFFFFFu;
}

// P6 binary PPM, 8-bit, linear clamp then x255 round.
inline void write_ppm(const std::filesystem::path& path, const Image& im) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write ppm: " + path.string());
  os << "P6\n" << im.width << " " << im.height << "\n255\n";
  for (float v : im.data) {
    const float clamped = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    os.put(static_cast<char>(static_cast<int>(clamped * 255.0f + 0.5f)));
  }
  if (!os) throw DataError("ppm write failed: " + path.string());
}

}  // namespace incnerf
