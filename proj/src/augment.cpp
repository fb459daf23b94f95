#include "poisonlab/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "poisonlab/data.hpp"

namespace poisonlab {
namespace {

constexpr double kLuma[3] = {0.299, 0.587, 0.114};

void check_prob(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(std::string(name) + " must lie in [0, 1]");
}

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

double luma(const Image& img, int y, int x) {
  if (img.channels() == 1) return img.at(y, x, 0);
  return kLuma[0] * img.at(y, x, 0) + kLuma[1] * img.at(y, x, 1) + kLuma[2] * img.at(y, x, 2);
}

}  // namespace

void AugmentConfig::validate() const {
  if (!(crop_scale.lo > 0.0 && crop_scale.lo <= crop_scale.hi && crop_scale.hi <= 1.0)) {
    throw std::invalid_argument("crop_scale must satisfy 0 < lo <= hi <= 1");
  }
  if (!(crop_aspect.lo > 0.0 && crop_aspect.lo <= crop_aspect.hi)) {
    throw std::invalid_argument("crop_aspect must satisfy 0 < lo <= hi");
  }
  check_prob(flip_prob, "flip_prob");
  check_prob(jitter_prob, "jitter_prob");
  check_prob(grayscale_prob, "grayscale_prob");
  check_prob(blur_prob, "blur_prob");
  if (!(jitter_strength >= 0.0)) throw std::invalid_argument("jitter_strength must be >= 0");
  if (!(blur_sigma.lo > 0.0 && blur_sigma.lo <= blur_sigma.hi)) {
    throw std::invalid_argument("blur_sigma must satisfy 0 < lo <= hi");
  }
}

AugmentConfig AugmentConfig::none() {
  AugmentConfig cfg;
  cfg.enable_crop = false;
  cfg.flip_prob = 0.0;
  cfg.jitter_prob = 0.0;
  cfg.grayscale_prob = 0.0;
  cfg.blur_prob = 0.0;
  return cfg;
}

void to_json(nlohmann::json& j, const AugmentConfig& cfg) {
  j = nlohmann::json{{"enable_crop", cfg.enable_crop},
                     {"crop_scale", {cfg.crop_scale.lo, cfg.crop_scale.hi}},
                     {"crop_aspect", {cfg.crop_aspect.lo, cfg.crop_aspect.hi}},
                     {"flip_prob", cfg.flip_prob},
                     {"jitter_strength", cfg.jitter_strength},
                     {"jitter_prob", cfg.jitter_prob},
                     {"grayscale_prob", cfg.grayscale_prob},
                     {"blur_sigma", {cfg.blur_sigma.lo, cfg.blur_sigma.hi}},
                     {"blur_prob", cfg.blur_prob}};
}

void from_json(const nlohmann::json& j, AugmentConfig& cfg) {
  auto range = [&](const char* key, Range& r) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_array() || v.size() != 2) throw std::invalid_argument(std::string(key) + " must be [lo, hi]");
    r = {v[0].get<double>(), v[1].get<double>()};
  };
  cfg.enable_crop = j.value("enable_crop", cfg.enable_crop);
  range("crop_scale", cfg.crop_scale);
  range("crop_aspect", cfg.crop_aspect);
  cfg.flip_prob = j.value("flip_prob", cfg.flip_prob);
  cfg.jitter_strength = j.value("jitter_strength", cfg.jitter_strength);
  cfg.jitter_prob = j.value("jitter_prob", cfg.jitter_prob);
  cfg.grayscale_prob = j.value("grayscale_prob", cfg.grayscale_prob);
  range("blur_sigma", cfg.blur_sigma);
  cfg.blur_prob = j.value("blur_prob", cfg.blur_prob);
}

CropBox sample_crop_box(int height, int width, Range scale, Range aspect, Rng& rng) {
  const double area = uniform(rng, scale.lo, scale.hi) * height * width;
  const double ratio = std::exp(uniform(rng, std::log(aspect.lo), std::log(aspect.hi)));
  CropBox box;
  box.width = std::clamp(static_cast<int>(std::lround(std::sqrt(area * ratio))), 1, width);
  box.height = std::clamp(static_cast<int>(std::lround(std::sqrt(area / ratio))), 1, height);
  box.y = static_cast<int>(uniform_int(rng, 0, height - box.height));
  box.x = static_cast<int>(uniform_int(rng, 0, width - box.width));
  return box;
}

Image crop(const Image& img, const CropBox& box) {
  if (box.y < 0 || box.x < 0 || box.height < 1 || box.width < 1 ||
      box.y + box.height > img.height() || box.x + box.width > img.width()) {
    throw std::invalid_argument("crop box outside the image");
  }
  Image out(box.height, box.width, img.channels());
  for (int y = 0; y < box.height; ++y) {
    for (int x = 0; x < box.width; ++x) {
      for (int c = 0; c < img.channels(); ++c) out.at(y, x, c) = img.at(box.y + y, box.x + x, c);
    }
  }
  return out;
}

Image random_crop(const Image& img, Range scale, Rng& rng, Range aspect) {
  const CropBox box = sample_crop_box(img.height(), img.width(), scale, aspect, rng);
  return resize(crop(img, box), img.height(), img.width());
}

Image hflip(const Image& img) {
  Image out = img;
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < img.channels(); ++c) out.at(y, img.width() - 1 - x, c) = img.at(y, x, c);
    }
  }
  return out;
}

Image to_grayscale(const Image& img) {
  Image out = img;
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const float g = clamp01(luma(img, y, x));
      for (int c = 0; c < img.channels(); ++c) out.at(y, x, c) = g;
    }
  }
  return out;
}

Image adjust_brightness(const Image& img, double factor) {
  Image out = img;
  for (float& v : out.pixels()) v = clamp01(v * factor);
  return out;
}

Image adjust_contrast(const Image& img, double factor) {
  double mean = 0.0;
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) mean += luma(img, y, x);
  }
  mean /= static_cast<double>(img.height()) * img.width();
  Image out = img;
  for (float& v : out.pixels()) v = clamp01((v - mean) * factor + mean);
  return out;
}

Image adjust_saturation(const Image& img, double factor) {
  if (img.channels() == 1) return img;
  Image out = img;
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const double g = luma(img, y, x);
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = clamp01(g + factor * (img.at(y, x, c) - g));
    }
  }
  return out;
}

Image gaussian_blur(const Image& img, double sigma) {
  if (!(sigma > 0.0)) return img;
  const int radius = std::max(1, std::min(static_cast<int>(std::ceil(3.0 * sigma)),
                                          std::max(img.height(), img.width()) / 2));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
    total += kernel[k + radius];
  }
  for (double& k : kernel) k /= total;

  const int h = img.height(), w = img.width(), ch = img.channels();
  std::vector<double> tmp(img.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          acc += kernel[k + radius] * img.at(y, std::clamp(x + k, 0, w - 1), c);
        }
        tmp[(static_cast<std::size_t>(y) * w + x) * ch + c] = acc;
      }
    }
  }
  Image out(h, w, ch);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          acc += kernel[k + radius] * tmp[(static_cast<std::size_t>(std::clamp(y + k, 0, h - 1)) * w + x) * ch + c];
        }
        out.at(y, x, c) = clamp01(acc);
      }
    }
  }
  return out;
}

Image augment_view(const Image& img, const AugmentConfig& cfg, Rng& rng) {
  Image out = cfg.enable_crop ? random_crop(img, cfg.crop_scale, rng, cfg.crop_aspect) : img;
  if (bernoulli(rng, cfg.flip_prob)) out = hflip(out);
  if (bernoulli(rng, cfg.jitter_prob)) {
    const double lo = std::max(0.0, 1.0 - cfg.jitter_strength);
    const double hi = 1.0 + cfg.jitter_strength;
    const double b = uniform(rng, lo, hi);
    const double c = uniform(rng, lo, hi);
    const double s = uniform(rng, lo, hi);
    out = adjust_saturation(adjust_contrast(adjust_brightness(out, b), c), s);
  }
  if (bernoulli(rng, cfg.grayscale_prob)) out = to_grayscale(out);
  if (bernoulli(rng, cfg.blur_prob)) {
    out = gaussian_blur(out, uniform(rng, cfg.blur_sigma.lo, cfg.blur_sigma.hi));
  }
  return out;
}

std::pair<Image, Image> two_views(const Image& img, const AugmentConfig& cfg, Rng& rng) {
  Image first = augment_view(img, cfg, rng);
  Image second = augment_view(img, cfg, rng);
  return {std::move(first), std::move(second)};
}

}  // namespace poisonlab
