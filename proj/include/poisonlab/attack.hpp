#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "poisonlab/augment.hpp"
#include "poisonlab/image.hpp"
#include "poisonlab/model.hpp"
#include "poisonlab/poison_batch.hpp"
#include "poisonlab/rng.hpp"

namespace poisonlab {

// One target downstream task: k_t target inputs, each with an attacker-chosen
// class and the reference images the attacker holds for that class.
struct TargetTask {
  std::vector<Image> targets;
  std::vector<int> target_classes;
  std::vector<std::vector<Image>> references;  // references[i] belongs to targets[i]
};

struct AttackSpec {
  std::vector<TargetTask> tasks;
  int budget = 0;                  // N
  std::vector<int> methods{1, 2, 3, 4};
  double evasion_crop_scale = 1.0;  // s_a; 1 disables evasion cropping
  std::uint64_t seed = 0;

  void validate() const;
  int total_targets() const;
  ImageShape working_shape() const;
};

// Stacks target and reference (vertically for methods 1-2, horizontally for
// 3-4, in the method's order) and rescales to out_size x out_size.
Image combine(const Image& target, const Image& reference, int method, int out_size);

struct EvasionCrop {
  Image image;
  CropOffsets offsets;
};

// Uniformly placed square of side floor(sqrt(s_a) * side), resized back to the
// input size.
EvasionCrop evasion_crop(const Image& img, double crop_scale, Rng& rng);

// Exactly spec.budget poisons; poison n uses its own derived stream, so the
// batch is reproducible and independent of construction order.
PoisonBatch build_poison(const AttackSpec& spec);

// Interpolation-consistency baseline: for each sampled (target, reference)
// pair, emits (1 - a) * reference + a * target for a on an evenly spaced grid
// of n_steps points in [0, 1], cycling pairs until the budget is filled.
PoisonBatch build_icp_poison(const AttackSpec& spec, int n_steps = 5);

// Pixel-wise (1 - alpha) * reference + alpha * target.
Image interpolate(const Image& target, const Image& reference, double alpha);

// Settings for the gradient-alignment baseline score.
struct AlignmentConfig {
  AugmentConfig augment;
  double temperature = 0.5;
  std::uint64_t seed = 0;
};

// Fixed views of the poison batch used by the contrastive gradient.
struct AlignmentViews {
  std::vector<Image> first;
  std::vector<Image> second;
};
AlignmentViews alignment_views(const PoisonBatch& poison, const AlignmentConfig& cfg);

// Cosine of two flattened gradients; throws NumericalDomainError on a zero
// vector.
double cosine_alignment(std::span<const double> a, std::span<const double> b);

// Encoder-parameter gradient of the summed target/reference cosine
// similarities, negated: sum over (t, i, r) of -grad L_sim(x_ti, x_r).
template <class T>
std::vector<double> outer_similarity_gradient(const BasicEncoderState<T>& state, const AttackSpec& spec);

// Encoder-parameter gradient of the SimCLR loss on the poison views.
template <class T>
std::vector<double> poison_contrastive_gradient(const BasicEncoderState<T>& state,
                                                const AlignmentViews& views, double tau);

// Cosine between the two gradients above, in [-1, 1].
template <class T>
double gradient_alignment_score(const BasicEncoderState<T>& state, const PoisonBatch& poison,
                                const AttackSpec& spec, const AlignmentConfig& cfg);

struct AlignmentAscentOptions {
  int steps = 10;
  double step_size = 0.02;
  double probe = 0.01;  // perturbation radius of the two-sided probe
  std::uint64_t seed = 0;
};

// Optional hook: raises the alignment score by simultaneous-perturbation
// ascent over poison pixels, projected to [0, 1]. A step is kept only if it
// does not lower the score. Returns the starting score followed by the score
// after each step.
std::vector<double> optimize_alignment(const EncoderState& state, PoisonBatch& poison,
                                       const AttackSpec& spec, const AlignmentConfig& cfg,
                                       const AlignmentAscentOptions& options);

void to_json(nlohmann::json& j, const PoisonRecord& r);
void from_json(const nlohmann::json& j, PoisonRecord& r);

// Container file plus "<path>.records.json" provenance sidecar.
void write_poison_batch(const PoisonBatch& batch, const std::filesystem::path& path);
PoisonBatch read_poison_batch(const std::filesystem::path& path);

}  // namespace poisonlab
