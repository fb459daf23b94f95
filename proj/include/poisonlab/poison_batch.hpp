#pragma once

#include <optional>
#include <string>
#include <vector>

#include "poisonlab/image.hpp"

namespace poisonlab {

// Layouts for joining a target and a reference into one poison image.
enum class Combination : int {
  kTargetTop = 1,      // target above, reference below
  kReferenceTop = 2,   // reference above, target below
  kTargetLeft = 3,     // target left, reference right
  kReferenceLeft = 4,  // reference left, target right
};

struct CropOffsets {
  int y = 0;
  int x = 0;
  int side = 0;
};

// Where a poison image came from.
struct PoisonRecord {
  int task = 0;
  int target = 0;
  int reference = 0;
  int method = 0;  // Combination value, or 0 for interpolation poisons
  double crop_scale = 1.0;
  CropOffsets target_crop;
  CropOffsets reference_crop;
  std::optional<double> alpha;  // interpolation weight on the target
};

struct PoisonBatch {
  std::vector<Image> images;
  std::vector<PoisonRecord> records;

  std::size_t size() const { return images.size(); }
};

}  // namespace poisonlab
