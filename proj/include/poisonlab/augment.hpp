#pragma once

#include <utility>

#include <nlohmann/json_fwd.hpp>

#include "poisonlab/image.hpp"
#include "poisonlab/rng.hpp"

namespace poisonlab {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  friend bool operator==(const Range&, const Range&) = default;
};

// View-generation settings for contrastive pre-training. Defaults are the
// usual SimCLR-style values.
struct AugmentConfig {
  bool enable_crop = true;
  Range crop_scale{0.08, 1.0};
  Range crop_aspect{3.0 / 4.0, 4.0 / 3.0};  // sampled log-uniformly
  double flip_prob = 0.5;
  double jitter_strength = 0.4;
  double jitter_prob = 0.8;
  double grayscale_prob = 0.2;
  Range blur_sigma{0.1, 2.0};
  double blur_prob = 0.5;

  void validate() const;

  // Identity pipeline: every operation disabled.
  static AugmentConfig none();

  friend bool operator==(const AugmentConfig&, const AugmentConfig&) = default;
};

void to_json(nlohmann::json& j, const AugmentConfig& cfg);
void from_json(const nlohmann::json& j, AugmentConfig& cfg);

struct CropBox {
  int y = 0;
  int x = 0;
  int height = 0;
  int width = 0;
};

// Draw order: area fraction, log aspect ratio, row offset, column offset.
CropBox sample_crop_box(int height, int width, Range scale, Range aspect, Rng& rng);

Image crop(const Image& img, const CropBox& box);

// Random resized crop back to the input size.
Image random_crop(const Image& img, Range scale, Rng& rng, Range aspect = {3.0 / 4.0, 4.0 / 3.0});

Image hflip(const Image& img);
Image to_grayscale(const Image& img);
Image adjust_brightness(const Image& img, double factor);
Image adjust_contrast(const Image& img, double factor);
Image adjust_saturation(const Image& img, double factor);
Image gaussian_blur(const Image& img, double sigma);

// Crop, flip, color jitter, grayscale, blur, in that order, each gated by its
// probability. Output has the input's shape and values in [0, 1].
Image augment_view(const Image& img, const AugmentConfig& cfg, Rng& rng);

// Two independent draws: a positive pair.
std::pair<Image, Image> two_views(const Image& img, const AugmentConfig& cfg, Rng& rng);

}  // namespace poisonlab
