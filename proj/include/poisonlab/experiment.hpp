#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poisonlab/attack.hpp"
#include "poisonlab/data.hpp"
#include "poisonlab/defense.hpp"
#include "poisonlab/downstream.hpp"
#include "poisonlab/pretrain.hpp"

namespace poisonlab {

// Validation failure tied to a dotted config path such as "attack.poison_rate".
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string path, const std::string& message)
      : std::invalid_argument(path + ": " + message), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct DataConfig {
  std::string source = "synthetic";  // or "files"
  int classes = 4;
  int image_size = 32;
  int pretrain_per_class = 500;
  int downstream_train_per_class = 250;
  int downstream_test_per_class = 100;
  int attacker_pool_per_class = 20;
  SyntheticStyle style;
  // Downstream train/test and attacker pool; a shifted family by default.
  SyntheticStyle downstream_style{.shape_offset = 3, .hue_offset = 0.125};
  // Container paths used when source == "files".
  std::filesystem::path pretrain_path;
  std::filesystem::path downstream_train_path;
  std::filesystem::path downstream_test_path;
  std::filesystem::path attacker_pool_path;
};

struct AttackConfig {
  std::string construction = "stitch";  // or "icp"
  int tasks = 1;
  int targets_per_task = 1;
  int references = 10;
  double poison_rate = 0.01;  // N = round(rate * |X_c|)
  std::vector<int> methods{1, 2, 3, 4};
  double evasion_crop_scale = 1.0;
  int icp_steps = 5;
};

struct SweepConfig {
  std::vector<double> poison_rates;
  std::vector<double> crop_scales;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int trials = 1;
  int workers = 1;
  std::filesystem::path output_dir = "runs/default";
  DataConfig data;
  AttackConfig attack;
  PretrainConfig pretrain;
  LinearConfig downstream;
  std::vector<std::string> defenses;
  DefenseParams defense;
  SweepConfig sweeps;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticStyle& s);
void from_json(const nlohmann::json& j, SyntheticStyle& s);
void to_json(nlohmann::json& j, const ExperimentConfig& cfg);

// Strict parse: unknown keys and type mismatches raise ConfigError.
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// The default desk regime, written out in full.
ExperimentConfig desk_config();

// trial i runs under mix(master, i); adding trials never changes earlier ones.
std::uint64_t trial_seed(std::uint64_t master, int trial);

struct TrialData {
  LabeledDataset pretrain;
  LabeledDataset downstream_train;
  LabeledDataset downstream_test;
  LabeledDataset attacker_pool;
};

TrialData make_trial_data(const ExperimentConfig& cfg, std::uint64_t seed);

// Targets come from one class of the attacker pool, references from another;
// the budget is round(rate * clean_size).
AttackSpec make_attack_spec(const ExperimentConfig& cfg, const LabeledDataset& pool, std::uint64_t seed,
                            std::size_t clean_size, double poison_rate, double crop_scale);

PoisonBatch construct_poison(const ExperimentConfig& cfg, const AttackSpec& spec);

struct SweepPoint {
  double x = 0.0;
  double asr = 0.0;
  double outer_objective = 0.0;
};

struct TrialOutcome {
  int trial = 0;
  std::uint64_t seed = 0;
  MetricsReport report;
  std::vector<EpochStats> clean_epochs;
  std::vector<EpochStats> poisoned_epochs;
  std::vector<std::pair<std::string, MetricsReport>> defenses;
  std::vector<SweepPoint> rate_sweep;
  std::vector<SweepPoint> crop_sweep;
};

void to_json(nlohmann::json& j, const TrialOutcome& t);
void from_json(const nlohmann::json& j, TrialOutcome& t);

// Runs one trial. When work_dir is given, encoder checkpoints and loss logs
// are kept there and reused on a later call with the same configuration.
TrialOutcome run_trial(const ExperimentConfig& cfg, int trial,
                       const std::optional<std::filesystem::path>& work_dir = std::nullopt);

struct ExperimentResult {
  std::vector<TrialOutcome> trials;
  std::filesystem::path output_dir;
};

// Full run: config snapshot, per-trial reports and checkpoints, metrics and
// summary CSVs, SVG plots and a manifest.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

struct RunReport {
  std::vector<TrialOutcome> trials;
  std::vector<std::string> problems;  // missing or corrupt trial files
  std::string table;                  // rendered text summary
  std::string summary_csv;
};

RunReport report_run(const std::filesystem::path& run_dir);

std::string metrics_csv(const std::vector<TrialOutcome>& trials);
std::string summary_csv(const std::vector<TrialOutcome>& trials);

// Files every finished run directory must hold; returns the missing ones.
std::vector<std::string> verify_manifest(const std::filesystem::path& run_dir);

}  // namespace poisonlab
