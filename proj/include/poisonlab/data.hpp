#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "poisonlab/image.hpp"
#include "poisonlab/poison_batch.hpp"

namespace poisonlab {

// Appearance knobs for the synthetic shape/color families.
struct SyntheticStyle {
  double position_jitter = 0.18;  // fraction of the side
  double min_radius = 0.22;       // fraction of the side
  double max_radius = 0.36;
  double color_jitter = 0.12;     // per channel, absolute
  double hue_jitter = 0.0;        // hue offset range around the class hue; 0.5 makes hue uninformative
  double background_level = 0.35; // max background intensity
  double noise_sigma = 0.05;
  bool colored = true;            // false -> 1 channel
  int shape_offset = 0;           // class c draws shape (c + shape_offset) mod 7
  double hue_offset = 0.0;        // added to every class hue
};

// Balanced dataset of n_classes visually separable families. Class c draws a
// distinct base shape and base color; samples jitter position, size, color,
// background, and pixel noise. Intensities are 8-bit representable.
LabeledDataset generate_synthetic(int n_per_class, int n_classes, int size, std::uint64_t seed,
                                  const SyntheticStyle& style = {});

// Bilinear resampling with half-pixel centers; output clamped to [0, 1].
Image resize(const Image& img, int out_height, int out_width);
Image rescale(const Image& img, int target);

// Clean images followed by the poisons, shuffled by a seeded permutation.
UnlabeledDataset merge_poison(const UnlabeledDataset& clean, const PoisonBatch& poison,
                              std::uint64_t seed);

struct DedupResult {
  UnlabeledDataset dataset;
  std::vector<std::size_t> removed_indices;
  std::vector<std::size_t> kept_indices;
};

// Keeps the first occurrence of each image that is byte-identical after
// 8-bit quantization.
DedupResult dedup(const UnlabeledDataset& ds);

// Container layout: "PENC", u16 version, u16 flags (bit0 = labeled), u32 N, H,
// W, C, N*H*W*C bytes, optional N u32 labels, u32-length-prefixed JSON trailer.
inline constexpr std::uint16_t kContainerVersion = 1;

void write_container(const LabeledDataset& ds, const std::filesystem::path& path);
void write_container(const UnlabeledDataset& ds, const std::filesystem::path& path);

std::vector<std::uint8_t> encode_container(const LabeledDataset& ds);
std::vector<std::uint8_t> encode_container(const UnlabeledDataset& ds);

struct ContainerContents {
  bool labeled = false;
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::vector<Provenance> provenance;
};

ContainerContents decode_container(std::span<const std::uint8_t> bytes);
ContainerContents read_container(const std::filesystem::path& path);

// Throws FormatError if the file is not labeled.
LabeledDataset read_labeled(const std::filesystem::path& path);
// Labeled files are accepted; their labels are dropped.
UnlabeledDataset read_unlabeled(const std::filesystem::path& path);

}  // namespace poisonlab
