#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "poisonlab/attack.hpp"
#include "poisonlab/downstream.hpp"
#include "poisonlab/image.hpp"
#include "poisonlab/model.hpp"
#include "poisonlab/pretrain.hpp"

namespace poisonlab {

struct FprFnr {
  double fpr = 0.0;            // 0 when there are no clean items
  std::optional<double> fnr;   // absent when there are no poisons
};

FprFnr compute_fpr_fnr(std::span<const std::size_t> flagged, std::span<const Provenance> provenance);

struct KMeansResult {
  std::vector<int> assignment;
  Eigen::MatrixXd centroids;  // k x dim
  int iterations = 0;
};

// Lloyd's algorithm on the rows of `points` with distance-weighted seeding.
KMeansResult kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed, int max_iterations = 100,
                    double tolerance = 1e-6);

struct ClusterStat {
  std::size_t size = 0;
  double mean_pairwise_distance = 0.0;  // +inf for clusters of fewer than 2
};

struct DetectionResult {
  std::vector<std::size_t> flagged_indices;  // ascending
  double fpr = 0.0;
  std::optional<double> fnr;
  std::vector<ClusterStat> cluster_stats;
  std::vector<int> flagged_clusters;
  std::vector<int> assignment;
};

void to_json(nlohmann::json& j, const DetectionResult& r);

double mean_pairwise_distance(const Eigen::MatrixXd& rows);

// Flags every member of the n_flagged clusters whose mean pairwise pixel
// distance is smallest.
DetectionResult kmeans_detect(const UnlabeledDataset& ds, int k_clusters, int n_flagged, std::uint64_t seed);

struct BaggingEnsemble {
  std::vector<EncoderState> base_states;
  std::vector<LinearClassifier> base_classifiers;
  std::vector<std::vector<std::size_t>> subsample_indices;

  std::size_t size() const { return base_classifiers.size(); }
  int num_classes() const;
  void validate() const;
};

// Uniform subsample without replacement for base b; ascending.
std::vector<std::size_t> bagging_subsample(std::size_t dataset_size, std::size_t subsample_size,
                                           std::uint64_t seed, std::size_t base);

BaggingEnsemble bagging_train(const UnlabeledDataset& ds, int n_subsamples, int subsample_size,
                              const PretrainConfig& pre_cfg, const LabeledDataset& downstream,
                              const LinearConfig& down_cfg, std::uint64_t seed, int workers = 1);

// Plurality; ties go to the smallest class index.
int plurality_vote(std::span<const int> votes, int num_classes);

int bagging_predict(const BaggingEnsemble& ensemble, const Image& img);
std::vector<int> bagging_predict(const BaggingEnsemble& ensemble, std::span<const Image> images);

enum class DefenseKind { kDedupKmeans, kEarlyStop, kBagging, kNoCrop, kFinetune };

const char* to_string(DefenseKind d);
DefenseKind defense_from_string(const std::string& name);

struct DefenseParams {
  int kmeans_clusters = 20;
  int kmeans_flagged = 4;
  int early_stop_epochs = 10;
  int bagging_subsamples = 9;
  int bagging_subsample_size = 500;
  double finetune_fraction = 0.5;
  std::optional<int> finetune_epochs;  // defaults to the pre-training epochs
  double finetune_learning_rate = 1e-4;
  int workers = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const DefenseParams& p);
void from_json(const nlohmann::json& j, DefenseParams& p);

struct DefenseInputs {
  UnlabeledDataset clean;     // X_c
  UnlabeledDataset poisoned;  // X_c merged with X_p
  LabeledDataset downstream_train;
  LabeledDataset downstream_test;
  AttackSpec spec;
  PretrainConfig pretrain;
  LinearConfig linear;
  // Reused when present instead of pre-training on `poisoned` again.
  std::optional<EncoderState> poisoned_state;
  // Carried into the report's ca column.
  double clean_accuracy = 0.0;
};

// Encoder metrics shared by every pipeline: pa, per-class accuracy, asr and
// the outer objective, with ca copied from `clean_accuracy`.
MetricsReport evaluate_encoder(const EncoderState& state, const LabeledDataset& train,
                               const LabeledDataset& test, const AttackSpec& spec,
                               const LinearConfig& linear, double clean_accuracy);

MetricsReport run_defense_pipeline(DefenseKind kind, const DefenseInputs& inputs, const DefenseParams& params);
MetricsReport run_defense_pipeline(const std::string& name, const DefenseInputs& inputs,
                                   const DefenseParams& params);

}  // namespace poisonlab
