#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include "countocc/core/tensor.hpp"

namespace countocc {

/// Binary PGM (P5), 8-bit. Grid layout {H, W}.
inline void write_pgm(const std::string& path, const Tensor<std::uint8_t>& grid) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << "P5\n" << grid.dim(1) << " " << grid.dim(0) << "\n255\n";
  out.write(reinterpret_cast<const char*>(grid.data()), static_cast<std::streamsize>(grid.size()));
}

inline Tensor<std::uint8_t> read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  std::string magic;
  std::size_t w = 0, h = 0;
  int maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || maxval != 255) throw std::runtime_error("unsupported pgm: " + path);
  in.get();
  Tensor<std::uint8_t> grid({h, w});
  in.read(reinterpret_cast<char*>(grid.data()), static_cast<std::streamsize>(grid.size()));
  if (!in) throw std::runtime_error("truncated pgm: " + path);
  return grid;
}

/// Binary PPM (P6) from a float image {H, W, 3} in [0, 1].
inline void write_ppm(const std::string& path, const Tensor<double>& image) {
  if (image.rank() != 3 || image.dim(2) != 3)
    throw std::invalid_argument("write_ppm: image must be {H,W,3}");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << "P6\n" << image.dim(1) << " " << image.dim(0) << "\n255\n";
  std::string buf;
  buf.reserve(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = std::min(1.0, std::max(0.0, image[i]));
    buf.push_back(static_cast<char>(std::lround(v * 255.0)));
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline Tensor<double> read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  std::string magic;
  std::size_t w = 0, h = 0;
  int maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255) throw std::runtime_error("unsupported ppm: " + path);
  in.get();
  std::string buf(h * w * 3, '\0');
  in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!in) throw std::runtime_error("truncated ppm: " + path);
  Tensor<double> image({h, w, 3});
  for (std::size_t i = 0; i < image.size(); ++i)
    image[i] = static_cast<double>(static_cast<unsigned char>(buf[i])) / 255.0;
  return image;
}

/// Heatmap export: values = round(255 * G / max(G)); an all-zero map exports
/// as all zeros.
template <typename T>
Tensor<std::uint8_t> heatmap_to_bytes(const Tensor<T>& map) {
  T mx = T{0};
  for (std::size_t i = 0; i < map.size(); ++i) mx = std::max(mx, map[i]);
  Tensor<std::uint8_t> bytes(map.shape(), 0);
  if (mx > T{0})
    for (std::size_t i = 0; i < map.size(); ++i)
      bytes[i] = static_cast<std::uint8_t>(
          std::lround(255.0 * static_cast<double>(map[i]) / static_cast<double>(mx)));
  return bytes;
}

/// Mask raster export, 0 = visible, 255 = occluded.
inline Tensor<std::uint8_t> mask_to_bytes(const Tensor<std::uint8_t>& mask) {
  Tensor<std::uint8_t> bytes(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) bytes[i] = mask[i] ? 255 : 0;
  return bytes;
}

}  // namespace countocc
