#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace poisonlab {

// H x W x C image, channel-last and row-major. Intensities live in [0, 1];
// on disk they are 8-bit (value / 255).
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels, float fill = 0.0f);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& at(int y, int x, int c) { return data_[index(y, x, c)]; }
  float at(int y, int x, int c) const { return data_[index(y, x, c)]; }

  std::span<float> pixels() { return data_; }
  std::span<const float> pixels() const { return data_; }

  bool same_shape(const Image& other) const {
    return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
  }

  // Throws std::invalid_argument if dimensions or intensities are invalid.
  void validate() const;

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<float> data_;
};

std::vector<std::uint8_t> to_bytes(const Image& img);
Image from_bytes(int height, int width, int channels, std::span<const std::uint8_t> bytes);

// Round every intensity to the nearest multiple of 1/255, clamped to [0, 1].
Image quantized(const Image& img);

enum class Provenance : std::uint8_t { kClean = 0, kPoison = 1 };

const char* to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

struct LabeledDataset {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return images.size(); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  void validate() const;

  friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;
};

struct UnlabeledDataset {
  std::vector<Image> images;
  std::vector<Provenance> provenance;

  std::size_t size() const { return images.size(); }
  std::size_t count(Provenance p) const;
  void validate() const;

  friend bool operator==(const UnlabeledDataset&, const UnlabeledDataset&) = default;
};

// Drops labels; every image is tagged clean.
UnlabeledDataset as_unlabeled(const LabeledDataset& ds);

// Shape shared by every image of a batch; throws on mismatch or empty input.
struct ImageShape {
  int height = 0;
  int width = 0;
  int channels = 0;
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};
ImageShape common_shape(std::span<const Image> images);

}  // namespace poisonlab
