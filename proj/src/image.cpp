#include "poisonlab/image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "byte_io.hpp"

namespace poisonlab {

Image::Image(int height, int width, int channels, float fill)
    : height_(height), width_(width), channels_(channels) {
  if (height < 1 || width < 1 || (channels != 1 && channels != 3)) {
    throw std::invalid_argument("image dimensions must be >= 1 with 1 or 3 channels, got " +
                                std::to_string(height) + "x" + std::to_string(width) + "x" +
                                std::to_string(channels));
  }
  data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

void Image::validate() const {
  if (height_ < 1 || width_ < 1 || (channels_ != 1 && channels_ != 3)) {
    throw std::invalid_argument("invalid image shape");
  }
  for (float v : data_) {
    if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("image intensity outside [0, 1]");
  }
}

std::vector<std::uint8_t> to_bytes(const Image& img) {
  std::vector<std::uint8_t> out(img.size());
  auto px = img.pixels();
  for (std::size_t i = 0; i < out.size(); ++i) {
    float v = std::clamp(px[i], 0.0f, 1.0f);
    out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return out;
}

Image from_bytes(int height, int width, int channels, std::span<const std::uint8_t> bytes) {
  Image img(height, width, channels);
  if (bytes.size() != img.size()) throw std::invalid_argument("byte count does not match image shape");
  auto px = img.pixels();
  for (std::size_t i = 0; i < bytes.size(); ++i) px[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

Image quantized(const Image& img) {
  return from_bytes(img.height(), img.width(), img.channels(), to_bytes(img));
}

const char* to_string(Provenance p) { return p == Provenance::kPoison ? "poison" : "clean"; }

Provenance provenance_from_string(const std::string& s) {
  if (s == "clean") return Provenance::kClean;
  if (s == "poison") return Provenance::kPoison;
  throw std::invalid_argument("unknown provenance tag '" + s + "'");
}

ImageShape common_shape(std::span<const Image> images) {
  if (images.empty()) throw std::invalid_argument("empty image batch");
  ImageShape shape{images[0].height(), images[0].width(), images[0].channels()};
  for (const auto& img : images) {
    if (img.height() != shape.height || img.width() != shape.width ||
        img.channels() != shape.channels) {
      throw std::invalid_argument("images in a batch must share one shape");
    }
  }
  return shape;
}

void LabeledDataset::validate() const {
  if (images.size() != labels.size()) throw std::invalid_argument("images/labels length mismatch");
  if (!images.empty()) common_shape(images);
  const int c = num_classes();
  for (int y : labels) {
    if (y < 0 || y >= c) throw std::invalid_argument("label " + std::to_string(y) + " out of range");
  }
}

std::size_t UnlabeledDataset::count(Provenance p) const {
  return static_cast<std::size_t>(std::count(provenance.begin(), provenance.end(), p));
}

void UnlabeledDataset::validate() const {
  if (images.size() != provenance.size()) {
    throw std::invalid_argument("images/provenance length mismatch");
  }
  if (!images.empty()) common_shape(images);
}

UnlabeledDataset as_unlabeled(const LabeledDataset& ds) {
  UnlabeledDataset out;
  out.images = ds.images;
  out.provenance.assign(ds.images.size(), Provenance::kClean);
  return out;
}

}  // namespace poisonlab
