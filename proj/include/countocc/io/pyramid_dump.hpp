#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include "countocc/pyramid.hpp"

namespace countocc {

/// Binary pyramid dump for cross-implementation diffing. Per level: header
/// (level, B, C, H, W as little-endian int32) then float32 values row-major
/// over (B, C, H, W). In-memory tokens are [H*W x C]; the dump transposes to
/// channel-major.
template <typename T>
void dump_pyramid(const FeaturePyramid<T>& pyramid, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  auto put_i32 = [&](std::int32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
    const auto& level = pyramid.levels[l];
    const std::size_t c = level.channels();
    put_i32(static_cast<std::int32_t>(l));
    put_i32(1);  // batch
    put_i32(static_cast<std::int32_t>(c));
    put_i32(static_cast<std::int32_t>(level.h));
    put_i32(static_cast<std::int32_t>(level.w));
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t pos = 0; pos < level.positions(); ++pos) {
        const auto v = static_cast<float>(level.tokens(pos, ch));
        out.write(reinterpret_cast<const char*>(&v), 4);
      }
  }
}

template <typename T>
FeaturePyramid<T> load_pyramid(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  FeaturePyramid<T> pyramid;
  auto get_i32 = [&]() {
    std::int32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  while (true) {
    const std::int32_t level_id = get_i32();
    if (!in) break;
    (void)level_id;
    const std::int32_t batch = get_i32();
    const auto c = static_cast<std::size_t>(get_i32());
    const auto h = static_cast<std::size_t>(get_i32());
    const auto w = static_cast<std::size_t>(get_i32());
    if (batch != 1) throw std::runtime_error("pyramid dump: only B=1 supported");
    typename FeaturePyramid<T>::Level level;
    level.h = h;
    level.w = w;
    level.tokens = Tensor<T>({h * w, c});
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t pos = 0; pos < h * w; ++pos) {
        float v = 0;
        in.read(reinterpret_cast<char*>(&v), 4);
        level.tokens(pos, ch) = static_cast<T>(v);
      }
    if (!in) throw std::runtime_error("truncated pyramid dump: " + path);
    pyramid.levels.push_back(std::move(level));
  }
  return pyramid;
}

}  // namespace countocc
