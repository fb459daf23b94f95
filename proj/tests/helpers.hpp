#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "poisonlab/image.hpp"
#include "poisonlab/rng.hpp"

namespace testutil {

// Channel 0 holds x / (W-1), channel 1 holds y / (H-1), channel 2 their mean.
inline poisonlab::Image ramp(int size = 32) {
  poisonlab::Image img(size, size, 3);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const float fx = static_cast<float>(x) / static_cast<float>(size - 1);
      const float fy = static_cast<float>(y) / static_cast<float>(size - 1);
      img.at(y, x, 0) = fx;
      img.at(y, x, 1) = fy;
      img.at(y, x, 2) = 0.5f * (fx + fy);
    }
  }
  return img;
}

// 8-bit representable noise image.
inline poisonlab::Image noise(int h, int w, int c, std::uint64_t seed) {
  poisonlab::Rng rng(seed);
  poisonlab::Image img(h, w, c);
  for (float& v : img.pixels()) v = static_cast<float>(poisonlab::uniform_int(rng, 0, 255)) / 255.0f;
  return img;
}

inline poisonlab::Image constant(int h, int w, int c, float v) { return poisonlab::Image(h, w, c, v); }

// Fresh per-test scratch directory under the build tree.
inline std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("poisonlab_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
