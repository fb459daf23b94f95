#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "poisonlab/augment.hpp"
#include "poisonlab/image.hpp"
#include "poisonlab/model.hpp"

namespace poisonlab {

enum class Algorithm { kSimclr, kMoco };

const char* to_string(Algorithm a);
Algorithm algorithm_from_string(const std::string& s);

struct PretrainConfig {
  Algorithm algorithm = Algorithm::kSimclr;
  double temperature = 0.5;  // 0.2 is the usual MoCo value
  int batch_size = 256;
  int epochs = 50;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double moco_momentum = 0.99;
  int dictionary_capacity = 1024;
  AugmentConfig augment;
  Arch arch;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const PretrainConfig& cfg);
void from_json(const nlohmann::json& j, PretrainConfig& cfg);

// Adam over a flat parameter vector.
class Adam {
 public:
  Adam(std::size_t size, double lr, double beta1, double beta2, double eps);

  void step(std::span<float> params, std::span<const float> grads);
  long steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

struct EpochStats {
  int epoch = 0;        // 1-based
  double loss = 0.0;    // mean per-view loss over the epoch
  double seconds = 0.0;
};

struct PretrainCallbacks {
  // Return false to stop after this epoch.
  std::function<bool(const EpochStats&)> on_epoch;
  // When set, one JSON object per epoch is appended here.
  std::optional<std::filesystem::path> log_path;
};

struct PretrainResult {
  EncoderState state;
  std::vector<EpochStats> epochs;
};

// Contrastive pre-training from init(cfg.arch, cfg.seed).
PretrainResult pretrain(const UnlabeledDataset& ds, const PretrainConfig& cfg,
                        const PretrainCallbacks& callbacks = {});

// Same loop, continuing from `state`.
PretrainResult finetune(const EncoderState& state, const UnlabeledDataset& ds,
                        const PretrainConfig& cfg, const PretrainCallbacks& callbacks = {});

// Loss (raw sum over the 2K terms) and parameter gradients for one SimCLR
// batch; first[i] and second[i] are the two views of input i.
template <class T>
struct BasicContrastiveGradients {
  double loss = 0.0;
  std::vector<T> encoder;
  std::vector<T> head;
};

template <class T>
BasicContrastiveGradients<T> simclr_gradients(const BasicEncoderState<T>& state,
                                              std::span<const Image> first,
                                              std::span<const Image> second, double tau);

// Per-sample view stream used by the training loop.
std::uint64_t view_seed(std::uint64_t seed, int epoch, std::size_t index);

}  // namespace poisonlab
