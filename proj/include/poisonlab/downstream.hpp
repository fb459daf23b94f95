#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "poisonlab/attack.hpp"
#include "poisonlab/image.hpp"
#include "poisonlab/model.hpp"

namespace poisonlab {

// Row i holds the encoder features of image i.
Eigen::MatrixXd extract_features(const EncoderState& state, std::span<const Image> images);
Eigen::MatrixXd extract_features(const EncoderState& state, const LabeledDataset& ds);

struct LinearClassifier {
  Eigen::MatrixXd weights;  // feature_dim x C
  Eigen::VectorXd biases;   // C
  std::vector<std::string> class_names;

  int num_classes() const { return static_cast<int>(biases.size()); }
  int feature_dim() const { return static_cast<int>(weights.rows()); }
  void validate() const;

  // N x C
  Eigen::MatrixXd logits(const Eigen::MatrixXd& features) const;
  // Argmax, ties to the smallest class index.
  std::vector<int> predict(const Eigen::MatrixXd& features) const;
  int predict_one(const Eigen::VectorXd& feature) const;
};

struct LinearConfig {
  int epochs = 100;
  double learning_rate = 1e-3;
  int batch_size = 512;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const LinearConfig& cfg);
void from_json(const nlohmann::json& j, LinearConfig& cfg);

// Softmax cross-entropy with Adam over shuffled mini-batches. The class count
// is max(num_classes, max label + 1) when num_classes is 0.
LinearClassifier train_linear(const Eigen::MatrixXd& features, std::span<const int> labels,
                              const LinearConfig& cfg, int num_classes = 0,
                              std::vector<std::string> class_names = {});

LinearClassifier train_linear(const EncoderState& state, const LabeledDataset& ds, const LinearConfig& cfg);

struct AccuracyResult {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<double> per_class;        // NaN-free: classes with no items report 0
  std::vector<std::size_t> per_class_total;
};

AccuracyResult accuracy_of(std::span<const int> predictions, std::span<const int> labels, int num_classes);
AccuracyResult evaluate_accuracy(const LinearClassifier& clf, const Eigen::MatrixXd& features,
                                 std::span<const int> labels);
AccuracyResult evaluate_accuracy(const LinearClassifier& clf, const EncoderState& state,
                                 const LabeledDataset& test);

// Fraction of targets predicted as their target class; classifiers[t] serves
// task t.
double evaluate_asr(std::span<const LinearClassifier> classifiers, const EncoderState& state,
                    const AttackSpec& spec);
double asr_of(std::span<const int> predictions, std::span<const int> target_classes);

// Mean target/reference feature cosine over every (t, i, r).
double outer_objective(const EncoderState& state, const AttackSpec& spec);

struct MetricsReport {
  double asr = 0.0;
  double ca = 0.0;
  double pa = 0.0;
  double outer_objective = 0.0;
  std::optional<double> clean_outer_objective;
  std::vector<double> per_class_accuracy;
  std::optional<double> fpr;
  std::optional<double> fnr;
  nlohmann::json metadata = nlohmann::json::object();

  void validate() const;
};

void to_json(nlohmann::json& j, const MetricsReport& r);
void from_json(const nlohmann::json& j, MetricsReport& r);

// Fixed column order shared by every CSV writer.
std::vector<std::string> metrics_csv_header();
std::vector<std::string> metrics_csv_row(const MetricsReport& r);

}  // namespace poisonlab
