// Command-line front end for the poisoning lab.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poisonlab/attack.hpp"
#include "poisonlab/data.hpp"
#include "poisonlab/defense.hpp"
#include "poisonlab/downstream.hpp"
#include "poisonlab/errors.hpp"
#include "poisonlab/experiment.hpp"
#include "poisonlab/model.hpp"
#include "poisonlab/pretrain.hpp"
#include "poisonlab/report.hpp"

namespace fs = std::filesystem;
using Json = nlohmann::json;
using namespace poisonlab;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> trials;
  std::optional<int> workers;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config (JSON); the desk defaults apply when omitted");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--seed", c.seed, "master seed override");
  cmd->add_option("--trials", c.trials, "trial count override");
  cmd->add_option("--workers", c.workers, "concurrent trials");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? desk_config() : load_experiment_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.trials) cfg.trials = *c.trials;
  if (c.workers) cfg.workers = *c.workers;
  if (!c.out.empty()) cfg.output_dir = c.out;
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + p.string());
}

void write_json(const fs::path& p, const Json& j) { write_text(p, j.dump(2) + "\n"); }

struct Trial0 {
  std::uint64_t seed;
  TrialData data;
  AttackSpec spec;
  PoisonBatch poison;
  UnlabeledDataset clean;
  UnlabeledDataset poisoned;
  PretrainConfig pretrain;
  LinearConfig linear;
};

// The first trial's inputs, derived exactly as `run` derives them.
Trial0 trial0(const ExperimentConfig& cfg) {
  Trial0 t;
  t.seed = trial_seed(cfg.seed, 0);
  t.data = make_trial_data(cfg, t.seed);
  t.clean = as_unlabeled(t.data.pretrain);
  t.spec = make_attack_spec(cfg, t.data.attacker_pool, t.seed, t.clean.size(), cfg.attack.poison_rate,
                            cfg.attack.evasion_crop_scale);
  t.poison = construct_poison(cfg, t.spec);
  t.poisoned = merge_poison(t.clean, t.poison, derive_seed(t.seed, 0x4d455247ULL));
  t.pretrain = cfg.pretrain;
  t.pretrain.seed = derive_seed(t.seed, {0x505245ULL, cfg.pretrain.seed});
  t.linear = cfg.downstream;
  t.linear.seed = derive_seed(t.seed, {0x4c494eULL, cfg.downstream.seed});
  return t;
}

Json classifier_json(const LinearClassifier& c) {
  std::vector<std::vector<double>> w(static_cast<std::size_t>(c.weights.rows()));
  for (Eigen::Index i = 0; i < c.weights.rows(); ++i) {
    for (Eigen::Index k = 0; k < c.weights.cols(); ++k) w[i].push_back(c.weights(i, k));
  }
  std::vector<double> b(c.biases.data(), c.biases.data() + c.biases.size());
  return Json{{"class_names", c.class_names}, {"weights", w}, {"biases", b}};
}

int cmd_gen_data(const Common& c) {
  const auto cfg = resolve(c);
  const auto data = make_trial_data(cfg, trial_seed(cfg.seed, 0));
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  write_container(data.pretrain, out / "pretrain.penc");
  write_container(data.downstream_train, out / "downstream_train.penc");
  write_container(data.downstream_test, out / "downstream_test.penc");
  write_container(data.attacker_pool, out / "attacker_pool.penc");
  std::cout << "wrote 4 containers to " << out.string() << "\n";
  return kOk;
}

int cmd_attack(const Common& c) {
  const auto cfg = resolve(c);
  const Trial0 t = trial0(cfg);
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  write_poison_batch(t.poison, out / "poison.penc");
  write_container(t.poisoned, out / "poisoned_pretrain.penc");
  Json tasks = Json::array();
  for (const auto& task : t.spec.tasks) {
    tasks.push_back({{"targets", task.targets.size()}, {"target_classes", task.target_classes}});
  }
  write_json(out / "attack.json", {{"budget", t.spec.budget},
                                   {"methods", t.spec.methods},
                                   {"evasion_crop_scale", t.spec.evasion_crop_scale},
                                   {"construction", cfg.attack.construction},
                                   {"tasks", tasks},
                                   {"clean_size", t.clean.size()},
                                   {"poisoning_rate", static_cast<double>(t.spec.budget) / t.clean.size()}});
  std::cout << "crafted " << t.poison.size() << " poisons; poisoned set has " << t.poisoned.size() << " images\n";
  return kOk;
}

int cmd_pretrain(const Common& c, const std::string& data_path, bool clean_only) {
  const auto cfg = resolve(c);
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  UnlabeledDataset ds;
  PretrainConfig pcfg = cfg.pretrain;
  if (!data_path.empty()) {
    ds = read_unlabeled(data_path);
  } else {
    const Trial0 t = trial0(cfg);
    ds = clean_only ? t.clean : t.poisoned;
    pcfg = t.pretrain;
  }
  PretrainCallbacks cb;
  cb.log_path = out / "loss.jsonl";
  fs::remove(*cb.log_path);
  cb.on_epoch = [](const EpochStats& s) {
    std::cout << "epoch " << s.epoch << " loss " << s.loss << " (" << s.seconds << " s)\n";
    return true;
  };
  const auto r = pretrain(ds, pcfg, cb);
  save_checkpoint(r.state, out / "encoder.penw");
  std::cout << "saved " << (out / "encoder.penw").string() << "\n";
  return kOk;
}

int cmd_downstream(const Common& c, const std::string& checkpoint) {
  const auto cfg = resolve(c);
  const Trial0 t = trial0(cfg);
  const EncoderState state = load_checkpoint(checkpoint);
  const LinearClassifier clf = train_linear(state, t.data.downstream_train, t.linear);
  const AccuracyResult acc = evaluate_accuracy(clf, state, t.data.downstream_test);
  const fs::path out = cfg.output_dir;
  write_json(out / "classifier.json", classifier_json(clf));
  write_json(out / "accuracy.json", {{"accuracy", acc.accuracy}, {"per_class", acc.per_class}, {"total", acc.total}});
  std::cout << "test accuracy " << acc.accuracy << "\n";
  return kOk;
}

int cmd_evaluate(const Common& c, const std::string& checkpoint, const std::string& clean_checkpoint) {
  const auto cfg = resolve(c);
  const Trial0 t = trial0(cfg);
  const EncoderState state = load_checkpoint(checkpoint);
  double ca = 0.0;
  std::optional<double> clean_outer;
  if (!clean_checkpoint.empty()) {
    const EncoderState clean = load_checkpoint(clean_checkpoint);
    ca = evaluate_accuracy(train_linear(clean, t.data.downstream_train, t.linear), clean, t.data.downstream_test).accuracy;
    clean_outer = outer_objective(clean, t.spec);
  }
  MetricsReport r = evaluate_encoder(state, t.data.downstream_train, t.data.downstream_test, t.spec, t.linear, ca);
  r.clean_outer_objective = clean_outer;
  r.metadata["checkpoint"] = checkpoint;
  if (clean_checkpoint.empty()) r.metadata["ca"] = "not computed (no --clean-checkpoint)";
  const fs::path out = cfg.output_dir;
  write_json(out / "report.json", r);
  const auto header = metrics_csv_header();
  const std::vector<std::vector<std::string>> rows{metrics_csv_row(r)};
  write_text(out / "report.csv", csv_document(header, rows));
  std::cout << Json(r).dump(2) << "\n";
  return kOk;
}

int cmd_defend(const Common& c, std::vector<std::string> names) {
  auto cfg = resolve(c);
  if (names.empty()) names = cfg.defenses;
  if (names.empty()) names = {"dedup_kmeans", "early_stop", "bagging", "no_crop", "finetune"};
  for (const auto& n : names) defense_from_string(n);
  cfg.defenses = names;
  cfg.trials = 1;
  const TrialOutcome outcome = run_trial(cfg, 0, fs::path(cfg.output_dir) / "work");
  const fs::path out = cfg.output_dir;
  if (std::find(names.begin(), names.end(), "dedup_kmeans") != names.end()) {
    // Indices refer to poisoned_pretrain.penc as written by `attack`.
    const Trial0 t = trial0(cfg);
    const DedupResult dd = dedup(t.poisoned);
    const DetectionResult det = kmeans_detect(dd.dataset, cfg.defense.kmeans_clusters, cfg.defense.kmeans_flagged,
                                              derive_seed(t.seed, {0x444546ULL, cfg.defense.seed}));
    std::string list;
    for (std::size_t i : det.flagged_indices) list += std::to_string(dd.kept_indices[i]) + "\n";
    write_text(out / "flagged.txt", list);
    std::string removed;
    for (std::size_t i : dd.removed_indices) removed += std::to_string(i) + "\n";
    write_text(out / "duplicates.txt", removed);
    write_json(out / "detection.json", det);
  }
  write_json(out / "defenses.json", outcome);
  write_text(out / "defenses.csv", metrics_csv({outcome}));
  for (const auto& [name, r] : outcome.defenses) {
    std::cout << name << ": asr " << r.asr << " pa " << r.pa << " outer " << r.outer_objective << "\n";
  }
  return kOk;
}

int cmd_run(const Common& c) {
  const auto cfg = resolve(c);
  const auto result = run_experiment(cfg);
  const RunReport rep = report_run(result.output_dir);
  std::cout << rep.table;
  return kOk;
}

int cmd_report(const Common& c, const std::string& positional) {
  const fs::path dir = !positional.empty() ? fs::path(positional) : fs::path(c.out);
  if (dir.empty()) throw std::invalid_argument("report needs a run directory");
  if (!fs::is_directory(dir)) throw std::invalid_argument("not a directory: " + dir.string());
  const RunReport rep = report_run(dir);
  std::cout << rep.table;
  write_text(dir / "report.txt", rep.table);
  if (rep.trials.empty()) throw std::runtime_error("no valid trial reports in " + dir.string());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive-encoder poisoning lab"};
  app.require_subcommand(1);
  Common common;
  std::string data_path, checkpoint, clean_checkpoint, run_dir;
  bool clean_only = false;
  std::vector<std::string> defenses;

  auto* gen = app.add_subcommand("gen-data", "write the synthetic datasets of trial 0");
  auto* attack = app.add_subcommand("attack", "craft the poison batch of trial 0");
  auto* pre = app.add_subcommand("pretrain", "contrastive pre-training");
  pre->add_option("--data", data_path, "unlabeled container to train on (default: trial 0 poisoned set)");
  pre->add_flag("--clean", clean_only, "train on the clean trial 0 set instead");
  auto* down = app.add_subcommand("downstream", "train and test a linear classifier on an encoder");
  down->add_option("--checkpoint", checkpoint, "encoder checkpoint")->required();
  auto* eval = app.add_subcommand("evaluate", "ASR / PA / outer objective of an encoder");
  eval->add_option("--checkpoint", checkpoint, "encoder checkpoint")->required();
  eval->add_option("--clean-checkpoint", clean_checkpoint, "clean encoder for CA");
  auto* defend = app.add_subcommand("defend", "run defenses on trial 0");
  defend->add_option("--defense", defenses, "dedup_kmeans | early_stop | bagging | no_crop | finetune");
  auto* run = app.add_subcommand("run", "full multi-trial experiment");
  auto* report = app.add_subcommand("report", "aggregate a run directory");
  report->add_option("run_dir", run_dir, "run directory");
  for (auto* cmd : {gen, attack, pre, down, eval, defend, run, report}) add_common(cmd, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(common);
    if (attack->parsed()) return cmd_attack(common);
    if (pre->parsed()) return cmd_pretrain(common, data_path, clean_only);
    if (down->parsed()) return cmd_downstream(common, checkpoint);
    if (eval->parsed()) return cmd_evaluate(common, checkpoint, clean_checkpoint);
    if (defend->parsed()) return cmd_defend(common, defenses);
    if (run->parsed()) return cmd_run(common);
    if (report->parsed()) return cmd_report(common, run_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kValidation;
}
