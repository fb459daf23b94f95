// Acceptance run: one PASS/FAIL line per criterion.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "poisonlab/attack.hpp"
#include "poisonlab/data.hpp"
#include "poisonlab/defense.hpp"
#include "poisonlab/experiment.hpp"
#include "poisonlab/losses.hpp"
#include "poisonlab/rng.hpp"

using namespace poisonlab;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Eigen::MatrixXd gaussian(int rows, int cols, Rng& rng) {
  std::normal_distribution<double> n;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = n(rng);
  }
  return m;
}

Image noise_image(int size, std::uint64_t seed) {
  Rng rng(seed);
  Image img(size, size, 3);
  for (float& v : img.pixels()) v = static_cast<float>(uniform_int(rng, 0, 255)) / 255.0f;
  return img;
}

Image constant_image(int size, int channels, float v) {
  Image img(size, size, channels);
  for (float& p : img.pixels()) p = v;
  return img;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

double max_rel_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric) {
  const double scale = std::max(numeric.cwiseAbs().maxCoeff(), 1e-8);
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// ------------------------------------------------------------ exact suites

Verdict loss_identities() {
  Rng rng(1);
  const double k1 = simclr_loss(gaussian(2, 8, rng), simclr_pairing(1), 0.5).value;
  const double same = simclr_loss(Eigen::MatrixXd::Ones(4, 6), simclr_pairing(2), 0.5).value / 4.0;
  const Eigen::VectorXd q = gaussian(8, 1, rng);
  const Eigen::VectorXd k = gaussian(8, 1, rng);
  const double empty = moco_loss(q, k, Eigen::MatrixXd(0, 8), 0.2).value;
  const Eigen::VectorXd qn = q.normalized();
  Eigen::MatrixXd opposite(1, 8);
  opposite.row(0) = -qn.transpose();
  const double two = moco_loss(q, qn, opposite, 1.0).value;

  const double e1 = std::abs(k1), e2 = std::abs(same - std::log(3.0)), e3 = std::abs(empty),
               e4 = std::abs(two - std::log1p(std::exp(-2.0)));
  return {e1 <= 1e-6 && e2 <= 1e-5 && e3 <= 1e-6 && e4 <= 1e-5,
          fmt("|K=1|=%.1e |ln3 term|=%.1e |empty dict|=%.1e |two-term|=%.1e", e1, e2, e3, e4)};
}

Verdict gradient_checks() {
  Rng rng(2);
  const double h = 1e-4;
  double worst_simclr = 0, worst_moco = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd u = gaussian(8, 16, rng);
    const auto pair = simclr_pairing(4);
    const auto res = simclr_loss(u, pair, 0.5);
    Eigen::MatrixXd numeric(u.rows(), u.cols());
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
      for (Eigen::Index j = 0; j < u.cols(); ++j) {
        Eigen::MatrixXd up = u, dn = u;
        up(i, j) += h;
        dn(i, j) -= h;
        numeric(i, j) = (simclr_loss(up, pair, 0.5).value - simclr_loss(dn, pair, 0.5).value) / (2 * h);
      }
    }
    worst_simclr = std::max(worst_simclr, max_rel_error(res.grad, numeric));

    const Eigen::VectorXd q = gaussian(16, 1, rng);
    const Eigen::VectorXd kp = gaussian(16, 1, rng);
    const Eigen::MatrixXd dict = gaussian(8, 16, rng);
    const auto m = moco_loss(q, kp, dict, 0.2);
    Eigen::VectorXd mn(16);
    for (int j = 0; j < 16; ++j) {
      Eigen::VectorXd up = q, dn = q;
      up[j] += h;
      dn[j] -= h;
      mn[j] = (moco_loss(up, kp, dict, 0.2).value - moco_loss(dn, kp, dict, 0.2).value) / (2 * h);
    }
    worst_moco = std::max(worst_moco, max_rel_error(m.grad, mn));
  }
  return {worst_simclr < 1e-4 && worst_moco < 1e-4,
          fmt("max rel error simclr %.2e, moco %.2e over 20 instances", worst_simclr, worst_moco)};
}

Verdict combination_exactness() {
  int asymmetric = 0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Image a = noise_image(32, 2 * s + 1), b = noise_image(32, 2 * s + 2);
    if (!(combine(a, b, 1, 32) == combine(b, a, 2, 32))) ++asymmetric;
    if (!(combine(a, b, 3, 32) == combine(b, a, 4, 32))) ++asymmetric;
  }
  const Image zero = constant_image(32, 3, 0.0f), one = constant_image(32, 3, 1.0f);
  const Image top = combine(zero, one, 1, 32), left = combine(zero, one, 3, 32);
  const Image bottom = combine(zero, one, 2, 32), right = combine(zero, one, 4, 32);
  double worst = 0;
  for (int y = 0; y < 32; ++y) {
    const double e = y < 16 ? 0.0 : 1.0;
    for (int x = 0; x < 32; ++x) {
      for (int c = 0; c < 3; ++c) {
        worst = std::max(worst, std::abs(top.at(y, x, c) - e));
        worst = std::max(worst, std::abs(bottom.at(y, x, c) - (1.0 - e)));
        worst = std::max(worst, std::abs(left.at(x, y, c) - e));
        worst = std::max(worst, std::abs(right.at(x, y, c) - (1.0 - e)));
      }
    }
  }
  const double odd[5] = {0.0, 0.0, 0.5, 1.0, 1.0};
  const Image small = combine(constant_image(5, 1, 0.0f), constant_image(5, 1, 1.0f), 1, 5);
  for (int y = 0; y < 5; ++y) {
    for (int x = 0; x < 5; ++x) worst = std::max(worst, std::abs(small.at(y, x, 0) - odd[y]));
  }
  return {asymmetric == 0 && worst <= 1.0 / 255.0,
          fmt("%d asymmetric pairs of 20; max boundary deviation %.2e", asymmetric, worst)};
}

// ---------------------------------------------------------- desk regime

struct DeskRun {
  std::vector<TrialOutcome> trials;
  double seconds = 0;
};

const MetricsReport* defense_report(const TrialOutcome& t, const std::string& name) {
  for (const auto& [n, r] : t.defenses) {
    if (n == name) return &r;
  }
  return nullptr;
}

Verdict attack_effect(const DeskRun& run) {
  std::vector<double> clean, poisoned;
  double pretrain_seconds = 0;
  for (const auto& t : run.trials) {
    clean.push_back(*t.report.clean_outer_objective);
    poisoned.push_back(t.report.outer_objective);
    for (const auto& e : t.clean_epochs) pretrain_seconds += e.seconds;
    for (const auto& e : t.poisoned_epochs) pretrain_seconds += e.seconds;
  }
  const double gap = mean_of(poisoned) - mean_of(clean);
  return {gap >= 0.15, fmt("outer objective clean %.3f poisoned %.3f gap %.3f (need >= 0.15); "
                           "%zu trials, pre-training %.1f min",
                           mean_of(clean), mean_of(poisoned), gap, run.trials.size(), pretrain_seconds / 60)};
}

Verdict asr_utility(const DeskRun& run) {
  std::vector<double> asr, ca, pa;
  for (const auto& t : run.trials) {
    asr.push_back(t.report.asr);
    ca.push_back(t.report.ca);
    pa.push_back(t.report.pa);
  }
  const double diff = std::abs(mean_of(ca) - mean_of(pa));
  return {mean_of(asr) >= 0.5 && diff <= 0.05,
          fmt("mean ASR %.3f (need >= 0.5); CA %.3f PA %.3f |CA-PA| %.3f (need <= 0.05)", mean_of(asr), mean_of(ca),
              mean_of(pa), diff)};
}

Verdict bagging_defense(const DeskRun& run) {
  std::vector<double> asr, pa, single;
  for (const auto& t : run.trials) {
    const MetricsReport* r = defense_report(t, "bagging");
    if (!r) return {false, "bagging report missing"};
    asr.push_back(r->asr);
    pa.push_back(r->pa);
    single.push_back(t.report.pa);
  }
  const double drop = mean_of(single) - mean_of(pa);
  return {mean_of(asr) <= 0.2 && drop >= 0.10,
          fmt("ensemble ASR %.3f (need <= 0.2); PA %.3f vs single %.3f, drop %.3f (need >= 0.10)", mean_of(asr),
              mean_of(pa), mean_of(single), drop)};
}

Verdict finetune_defense(const DeskRun& run) {
  std::vector<double> before, after, pa_before, pa_after;
  for (const auto& t : run.trials) {
    const MetricsReport* r = defense_report(t, "finetune");
    if (!r) return {false, "finetune report missing"};
    before.push_back(t.report.outer_objective);
    after.push_back(r->outer_objective);
    pa_before.push_back(t.report.pa);
    pa_after.push_back(r->pa);
  }
  const double reduction = mean_of(before) - mean_of(after);
  const double pa_change = std::abs(mean_of(pa_after) - mean_of(pa_before));
  return {reduction >= 0.1 && pa_change <= 0.05,
          fmt("outer objective %.3f -> %.3f, reduction %.3f (need >= 0.1); |PA change| %.3f (need <= 0.05)",
              mean_of(before), mean_of(after), reduction, pa_change)};
}

// ----------------------------------------------------------- defenses

Verdict dedup_bound() {
  AttackSpec spec;
  TargetTask task;
  task.targets.push_back(noise_image(32, 101));
  task.target_classes.push_back(1);
  task.references.push_back({noise_image(32, 202)});
  spec.tasks.push_back(task);
  spec.budget = 100;
  spec.evasion_crop_scale = 1.0;
  spec.seed = 7;
  const PoisonBatch poison = build_poison(spec);
  const auto clean = as_unlabeled(generate_synthetic(100, 4, 32, 9));
  const UnlabeledDataset merged = merge_poison(clean, poison, 11);
  const DedupResult dd = dedup(merged);
  std::size_t removed_poison = 0;
  for (std::size_t i : dd.removed_indices) removed_poison += merged.provenance[i] == Provenance::kPoison;
  const std::size_t surviving = dd.dataset.count(Provenance::kPoison);
  return {removed_poison >= 96 && surviving <= 4,
          fmt("removed %zu of 100 poisons, %zu distinct survive; %zu clean removed", removed_poison, surviving,
              dd.removed_indices.size() - removed_poison)};
}

Verdict detection_under_evasion(const ExperimentConfig& desk) {
  std::vector<double> full, cropped;
  for (int trial = 0; trial < desk.trials; ++trial) {
    const std::uint64_t seed = trial_seed(desk.seed, trial);
    const TrialData data = make_trial_data(desk, seed);
    const UnlabeledDataset clean = as_unlabeled(data.pretrain);
    for (double scale : {1.0, 0.8}) {
      const AttackSpec spec = make_attack_spec(desk, data.attacker_pool, seed, clean.size(), desk.attack.poison_rate, scale);
      const UnlabeledDataset ds = merge_poison(clean, construct_poison(desk, spec), derive_seed(seed, 0x4d455247ULL));
      const DetectionResult det = kmeans_detect(ds, 20, desk.defense.kmeans_flagged, derive_seed(seed, 0x444546ULL));
      (scale == 1.0 ? full : cropped).push_back(det.fnr.value());
    }
  }
  const double f1 = mean_of(full), f08 = mean_of(cropped);
  return {f1 <= 0.3 && f08 >= 2.0 * f1,
          fmt("FNR s_a=1 %.3f (need <= 0.3), s_a=0.8 %.3f (need >= %.3f); K=20, %zu trials", f1, f08, 2.0 * f1,
              full.size())};
}

// -------------------------------------------------------- determinism

Verdict determinism(const fs::path& work) {
  ExperimentConfig c;
  c.seed = 21;
  c.trials = 2;
  c.data.classes = 3;
  c.data.image_size = 16;
  c.data.pretrain_per_class = 40;
  c.data.downstream_train_per_class = 20;
  c.data.downstream_test_per_class = 10;
  c.data.attacker_pool_per_class = 8;
  c.attack.references = 4;
  c.attack.poison_rate = 0.05;
  c.pretrain.arch.widths = {8, 8};
  c.pretrain.arch.strides = {2, 2};
  c.pretrain.arch.norm_groups = 2;
  c.pretrain.arch.feature_dim = 16;
  c.pretrain.arch.head_hidden = 16;
  c.pretrain.arch.proj_dim = 8;
  c.pretrain.epochs = 3;
  c.pretrain.batch_size = 16;
  c.downstream.epochs = 10;
  c.downstream.batch_size = 16;
  c.defenses = {"dedup_kmeans", "early_stop", "bagging", "no_crop", "finetune"};
  c.defense.kmeans_clusters = 6;
  c.defense.kmeans_flagged = 2;
  c.defense.early_stop_epochs = 1;
  c.defense.bagging_subsamples = 3;
  c.defense.bagging_subsample_size = 40;
  c.sweeps.poison_rates = {0.0, 0.1};
  c.sweeps.crop_scales = {0.8};

  std::vector<std::string> metrics, summary;
  for (int rep = 0; rep < 2; ++rep) {
    c.output_dir = work / ("determinism_" + std::to_string(rep));
    c.workers = rep + 1;
    fs::remove_all(c.output_dir);
    run_experiment(c);
    metrics.push_back(slurp(c.output_dir / "metrics.csv"));
    summary.push_back(slurp(c.output_dir / "summary.csv"));
  }
  const bool same = metrics[0] == metrics[1] && summary[0] == summary[1] && !metrics[0].empty();
  return {same, fmt("metrics.csv %s, summary.csv %s across two fresh runs (1 and 2 workers)",
                    metrics[0] == metrics[1] ? "identical" : "differs", summary[0] == summary[1] ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance run"};
  std::string work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--work", work, "scratch directory; finished desk trials are reused from here");
  app.add_option("--only", only, "criteria to run (default: all)");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int c) { return selected.empty() || selected.count(c) > 0; };
  fs::create_directories(work);

  ExperimentConfig desk = desk_config();
  desk.output_dir = fs::path(work) / "desk";
  desk.defenses = {"finetune", "bagging"};

  DeskRun run;
  if (wanted(4) || wanted(5) || wanted(8) || wanted(9)) {
    const auto t0 = std::chrono::steady_clock::now();
    run.trials = run_experiment(desk).trials;
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  const std::vector<std::pair<int, std::function<Verdict()>>> criteria{
      {1, loss_identities},
      {2, gradient_checks},
      {3, combination_exactness},
      {4, [&] { return attack_effect(run); }},
      {5, [&] { return asr_utility(run); }},
      {6, dedup_bound},
      {7, [&] { return detection_under_evasion(desk); }},
      {8, [&] { return bagging_defense(run); }},
      {9, [&] { return finetune_defense(run); }},
      {10, [&] { return determinism(work); }},
  };
  int failed = 0;
  for (const auto& [id, check] : criteria) {
    if (!wanted(id)) continue;
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << "criterion " << id << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << std::endl;
  }
  if (run.seconds > 0) std::cout << fmt("desk experiment wall time %.1f min", run.seconds / 60) << std::endl;
  return failed == 0 ? 0 : 1;
}
