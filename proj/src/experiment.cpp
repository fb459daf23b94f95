#include "poisonlab/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "byte_io.hpp"
#include "poisonlab/errors.hpp"
#include "poisonlab/report.hpp"
#include "poisonlab/rng.hpp"

namespace poisonlab {
namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

constexpr std::uint64_t kTrialStream = 0x545249414cULL;
constexpr std::uint64_t kDataStream = 0x44415441ULL;
constexpr std::uint64_t kAttackStream = 0x41545443ULL;
constexpr std::uint64_t kPretrainStream = 0x505245ULL;
constexpr std::uint64_t kLinearStream = 0x4c494eULL;
constexpr std::uint64_t kMergeStream = 0x4d455247ULL;
constexpr std::uint64_t kDefenseStream = 0x444546ULL;

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string key_tag(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

// ---------------------------------------------------------------- parsing

void check_keys(const Json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(path.empty() ? "<root>" : path, "expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items()) {
    if (!ok.count(k)) throw ConfigError(path.empty() ? k : path + "." + k, "unknown field");
  }
}

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

template <class T>
void read_field(const Json& j, const std::string& path, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(join(path, key), e.what());
  }
}

template <class Fn>
void wrap(const std::string& path, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path, e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path, e.what());
  }
}

// ---------------------------------------------------------------- json io

Json epochs_json(const std::vector<EpochStats>& epochs) {
  Json a = Json::array();
  for (const auto& e : epochs) a.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"seconds", e.seconds}});
  return a;
}

std::vector<EpochStats> epochs_from_json(const Json& a) {
  std::vector<EpochStats> out;
  for (const auto& e : a) {
    EpochStats s;
    s.epoch = e.at("epoch").get<int>();
    s.loss = e.at("loss").get<double>();
    s.seconds = e.value("seconds", 0.0);
    out.push_back(s);
  }
  return out;
}

Json sweep_json(const std::vector<SweepPoint>& pts) {
  Json a = Json::array();
  for (const auto& p : pts) a.push_back({{"x", p.x}, {"asr", p.asr}, {"outer_objective", p.outer_objective}});
  return a;
}

std::vector<SweepPoint> sweep_from_json(const Json& a) {
  std::vector<SweepPoint> out;
  for (const auto& p : a) out.push_back({p.at("x").get<double>(), p.at("asr").get<double>(), p.at("outer_objective").get<double>()});
  return out;
}

Json read_json_file(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  return Json::parse(bytes.begin(), bytes.end());
}

// ------------------------------------------------------------ encoders

struct TrainedEncoder {
  EncoderState state;
  std::vector<EpochStats> epochs;
};

std::string fingerprint(const ExperimentConfig& cfg, int trial, const std::string& name) {
  Json j;
  j["seed"] = cfg.seed;
  j["trial"] = trial;
  j["name"] = name;
  Json full = cfg;
  j["data"] = full["data"];
  j["attack"] = full["attack"];
  j["pretrain"] = full["pretrain"];
  const std::string s = j.dump();
  return hex64(fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())));
}

// Pre-trains, or reloads a matching checkpoint from work_dir.
TrainedEncoder train_cached(const UnlabeledDataset& ds, const PretrainConfig& pcfg, const ExperimentConfig& cfg,
                            int trial, const std::string& name, const std::optional<fs::path>& work_dir) {
  const std::string fp = fingerprint(cfg, trial, name);
  if (work_dir) {
    const fs::path ckpt = *work_dir / (name + ".penw");
    const fs::path meta = *work_dir / (name + ".json");
    if (fs::exists(ckpt) && fs::exists(meta)) {
      try {
        const Json m = read_json_file(meta);
        if (m.at("fingerprint").get<std::string>() == fp) {
          return {load_checkpoint(ckpt), epochs_from_json(m.at("epochs"))};
        }
      } catch (const std::exception&) {
        // stale or corrupt cache entry; retrain
      }
    }
  }
  PretrainCallbacks cb;
  if (work_dir) {
    const fs::path log = *work_dir / (name + "_loss.jsonl");
    fs::remove(log);
    cb.log_path = log;
  }
  PretrainResult r = pretrain(ds, pcfg, cb);
  if (work_dir) {
    save_checkpoint(r.state, *work_dir / (name + ".penw"));
    detail::write_text_atomic(*work_dir / (name + ".json"),
                              Json{{"fingerprint", fp}, {"epochs", epochs_json(r.epochs)}}.dump(2) + "\n");
  }
  return {std::move(r.state), std::move(r.epochs)};
}

template <class Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex m;
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min<int>(workers, static_cast<int>(n)); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(m);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

struct Row {
  std::string setting;
  const MetricsReport* report;
};

std::vector<Row> rows_of(const TrialOutcome& t) {
  std::vector<Row> rows{{"attack", &t.report}};
  for (const auto& [name, r] : t.defenses) rows.push_back({"defense:" + name, &r});
  return rows;
}

std::vector<double> column(const std::vector<const MetricsReport*>& reports, const std::string& metric) {
  std::vector<double> out;
  for (const auto* r : reports) {
    if (metric == "asr") out.push_back(r->asr);
    else if (metric == "ca") out.push_back(r->ca);
    else if (metric == "pa") out.push_back(r->pa);
    else if (metric == "outer_objective") out.push_back(r->outer_objective);
    else if (metric == "clean_outer_objective" && r->clean_outer_objective) out.push_back(*r->clean_outer_objective);
    else if (metric == "fpr" && r->fpr) out.push_back(*r->fpr);
    else if (metric == "fnr" && r->fnr) out.push_back(*r->fnr);
  }
  return out;
}

const std::vector<std::string> kMetrics{"asr", "ca", "pa", "outer_objective", "clean_outer_objective", "fpr", "fnr"};

std::map<std::string, std::vector<const MetricsReport*>> by_setting(const std::vector<TrialOutcome>& trials,
                                                                    std::vector<std::string>& order) {
  std::map<std::string, std::vector<const MetricsReport*>> out;
  for (const auto& t : trials) {
    for (const auto& row : rows_of(t)) {
      if (!out.count(row.setting)) order.push_back(row.setting);
      out[row.setting].push_back(row.report);
    }
  }
  return out;
}

std::string plot_sweep(const std::vector<TrialOutcome>& trials, bool rate) {
  std::map<double, std::vector<double>> asr, outer;
  for (const auto& t : trials) {
    const auto& pts = rate ? t.rate_sweep : t.crop_sweep;
    for (const auto& p : pts) {
      asr[p.x].push_back(p.asr);
      outer[p.x].push_back(p.outer_objective);
    }
  }
  PlotSeries a{"ASR", {}, {}}, o{"outer objective", {}, {}};
  for (const auto& [x, v] : asr) {
    a.x.push_back(x);
    a.y.push_back(spread_of(v).mean);
    o.x.push_back(x);
    o.y.push_back(spread_of(outer[x]).mean);
  }
  PlotSpec spec;
  spec.title = rate ? "Attack success vs poisoning rate" : "Attack success vs evasion cropping scale";
  spec.x_label = rate ? "poisoning rate" : "cropping scale";
  spec.y_label = "mean over trials";
  spec.y_min = std::min(0.0, o.y.empty() ? 0.0 : *std::min_element(o.y.begin(), o.y.end()));
  spec.y_max = 1.0;
  const std::vector<PlotSeries> series{a, o};
  return svg_line_plot(spec, series);
}

std::string plot_loss(const std::vector<TrialOutcome>& trials) {
  std::map<int, std::vector<double>> clean, poisoned;
  for (const auto& t : trials) {
    for (const auto& e : t.clean_epochs) clean[e.epoch].push_back(e.loss);
    for (const auto& e : t.poisoned_epochs) poisoned[e.epoch].push_back(e.loss);
  }
  PlotSeries c{"clean", {}, {}}, p{"poisoned", {}, {}};
  for (const auto& [e, v] : clean) {
    c.x.push_back(e);
    c.y.push_back(spread_of(v).mean);
  }
  for (const auto& [e, v] : poisoned) {
    p.x.push_back(e);
    p.y.push_back(spread_of(v).mean);
  }
  PlotSpec spec{"Pre-training loss", "epoch", "mean contrastive loss per view", std::nullopt, std::nullopt};
  const std::vector<PlotSeries> series{c, p};
  return svg_line_plot(spec, series);
}

void write_manifest(const fs::path& dir) {
  std::vector<std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string rel = fs::relative(entry.path(), dir).generic_string();
    if (rel == "manifest.json" || rel.find(".partial/") != std::string::npos) continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  Json list = Json::array();
  for (const auto& rel : files) {
    const auto bytes = detail::read_file(dir / rel);
    list.push_back({{"path", rel}, {"bytes", bytes.size()}, {"fnv1a64", hex64(fnv1a64(bytes))}});
  }
  detail::write_text_atomic(dir / "manifest.json", Json{{"files", list}}.dump(2) + "\n");
}

std::string trial_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "trial_%03d", i);
  return buf;
}

}  // namespace

// ------------------------------------------------------------------ config

void to_json(Json& j, const SyntheticStyle& s) {
  j = Json{{"position_jitter", s.position_jitter}, {"min_radius", s.min_radius},   {"max_radius", s.max_radius},
           {"color_jitter", s.color_jitter},       {"hue_jitter", s.hue_jitter},   {"background_level", s.background_level},
           {"noise_sigma", s.noise_sigma},         {"colored", s.colored},         {"shape_offset", s.shape_offset},
           {"hue_offset", s.hue_offset}};
}

namespace {

void read_style(const Json& j, const std::string& path, SyntheticStyle& s) {
  check_keys(j, path,
             {"position_jitter", "min_radius", "max_radius", "color_jitter", "hue_jitter", "background_level",
              "noise_sigma", "colored", "shape_offset", "hue_offset"});
  read_field(j, path, "position_jitter", s.position_jitter);
  read_field(j, path, "min_radius", s.min_radius);
  read_field(j, path, "max_radius", s.max_radius);
  read_field(j, path, "color_jitter", s.color_jitter);
  read_field(j, path, "hue_jitter", s.hue_jitter);
  read_field(j, path, "background_level", s.background_level);
  read_field(j, path, "noise_sigma", s.noise_sigma);
  read_field(j, path, "colored", s.colored);
  read_field(j, path, "shape_offset", s.shape_offset);
  read_field(j, path, "hue_offset", s.hue_offset);
}

void check_style(const SyntheticStyle& s, const std::string& path) {
  if (s.min_radius <= 0 || s.max_radius < s.min_radius) {
    throw ConfigError(path, "radius range must satisfy 0 < min_radius <= max_radius");
  }
  if (s.shape_offset < 0) throw ConfigError(path + ".shape_offset", "must be >= 0");
}

}  // namespace

void from_json(const Json& j, SyntheticStyle& s) { read_style(j, "data.style", s); }

void to_json(Json& j, const ExperimentConfig& c) {
  j = Json::object();
  j["seed"] = c.seed;
  j["trials"] = c.trials;
  j["workers"] = c.workers;
  j["output_dir"] = c.output_dir.generic_string();
  j["data"] = Json{{"source", c.data.source},
                   {"classes", c.data.classes},
                   {"image_size", c.data.image_size},
                   {"pretrain_per_class", c.data.pretrain_per_class},
                   {"downstream_train_per_class", c.data.downstream_train_per_class},
                   {"downstream_test_per_class", c.data.downstream_test_per_class},
                   {"attacker_pool_per_class", c.data.attacker_pool_per_class},
                   {"style", c.data.style},
                   {"downstream_style", c.data.downstream_style}};
  if (c.data.source == "files") {
    j["data"]["pretrain_path"] = c.data.pretrain_path.generic_string();
    j["data"]["downstream_train_path"] = c.data.downstream_train_path.generic_string();
    j["data"]["downstream_test_path"] = c.data.downstream_test_path.generic_string();
    j["data"]["attacker_pool_path"] = c.data.attacker_pool_path.generic_string();
  }
  j["attack"] = Json{{"construction", c.attack.construction},
                     {"tasks", c.attack.tasks},
                     {"targets_per_task", c.attack.targets_per_task},
                     {"references", c.attack.references},
                     {"poison_rate", c.attack.poison_rate},
                     {"methods", c.attack.methods},
                     {"evasion_crop_scale", c.attack.evasion_crop_scale},
                     {"icp_steps", c.attack.icp_steps}};
  j["pretrain"] = c.pretrain;
  j["downstream"] = c.downstream;
  j["defenses"] = c.defenses;
  j["defense"] = c.defense;
  j["sweeps"] = Json{{"poison_rates", c.sweeps.poison_rates}, {"crop_scales", c.sweeps.crop_scales}};
}

ExperimentConfig parse_experiment_config(const Json& j) {
  ExperimentConfig c = desk_config();
  check_keys(j, "", {"seed", "trials", "workers", "output_dir", "data", "attack", "pretrain", "downstream", "defenses",
                     "defense", "sweeps"});
  read_field(j, "", "seed", c.seed);
  read_field(j, "", "trials", c.trials);
  read_field(j, "", "workers", c.workers);
  if (j.contains("output_dir")) {
    std::string s;
    read_field(j, "", "output_dir", s);
    c.output_dir = s;
  }
  if (j.contains("data")) {
    const Json& d = j.at("data");
    check_keys(d, "data",
               {"source", "classes", "image_size", "pretrain_per_class", "downstream_train_per_class",
                "downstream_test_per_class", "attacker_pool_per_class", "style", "downstream_style", "pretrain_path",
                "downstream_train_path", "downstream_test_path", "attacker_pool_path"});
    read_field(d, "data", "source", c.data.source);
    read_field(d, "data", "classes", c.data.classes);
    read_field(d, "data", "image_size", c.data.image_size);
    read_field(d, "data", "pretrain_per_class", c.data.pretrain_per_class);
    read_field(d, "data", "downstream_train_per_class", c.data.downstream_train_per_class);
    read_field(d, "data", "downstream_test_per_class", c.data.downstream_test_per_class);
    read_field(d, "data", "attacker_pool_per_class", c.data.attacker_pool_per_class);
    if (d.contains("style")) read_style(d.at("style"), "data.style", c.data.style);
    if (d.contains("downstream_style")) {
      read_style(d.at("downstream_style"), "data.downstream_style", c.data.downstream_style);
    }
    for (auto [key, field] : {std::pair{"pretrain_path", &c.data.pretrain_path},
                              std::pair{"downstream_train_path", &c.data.downstream_train_path},
                              std::pair{"downstream_test_path", &c.data.downstream_test_path},
                              std::pair{"attacker_pool_path", &c.data.attacker_pool_path}}) {
      std::string s;
      read_field(d, "data", key, s);
      if (!s.empty()) *field = s;
    }
  }
  if (j.contains("attack")) {
    const Json& a = j.at("attack");
    check_keys(a, "attack",
               {"construction", "tasks", "targets_per_task", "references", "poison_rate", "methods",
                "evasion_crop_scale", "icp_steps"});
    read_field(a, "attack", "construction", c.attack.construction);
    read_field(a, "attack", "tasks", c.attack.tasks);
    read_field(a, "attack", "targets_per_task", c.attack.targets_per_task);
    read_field(a, "attack", "references", c.attack.references);
    read_field(a, "attack", "poison_rate", c.attack.poison_rate);
    read_field(a, "attack", "methods", c.attack.methods);
    read_field(a, "attack", "evasion_crop_scale", c.attack.evasion_crop_scale);
    read_field(a, "attack", "icp_steps", c.attack.icp_steps);
  }
  if (j.contains("pretrain")) {
    const Json& p = j.at("pretrain");
    check_keys(p, "pretrain",
               {"algorithm", "temperature", "batch_size", "epochs", "learning_rate", "beta1", "beta2", "adam_eps",
                "moco_momentum", "dictionary_capacity", "augment", "arch", "seed"});
    if (p.contains("augment")) {
      check_keys(p.at("augment"), "pretrain.augment",
                 {"enable_crop", "crop_scale", "crop_aspect", "flip_prob", "jitter_strength", "jitter_prob",
                  "grayscale_prob", "blur_sigma", "blur_prob"});
    }
    if (p.contains("arch")) {
      check_keys(p.at("arch"), "pretrain.arch",
                 {"in_channels", "widths", "strides", "norm_groups", "feature_dim", "head_hidden", "proj_dim"});
    }
    wrap("pretrain", [&] { from_json(p, c.pretrain); });
  }
  if (j.contains("downstream")) {
    check_keys(j.at("downstream"), "downstream", {"epochs", "learning_rate", "batch_size", "seed"});
    wrap("downstream", [&] { from_json(j.at("downstream"), c.downstream); });
  }
  read_field(j, "", "defenses", c.defenses);
  if (j.contains("defense")) {
    check_keys(j.at("defense"), "defense",
               {"kmeans_clusters", "kmeans_flagged", "early_stop_epochs", "bagging_subsamples",
                "bagging_subsample_size", "finetune_fraction", "finetune_epochs", "finetune_learning_rate", "workers",
                "seed"});
    wrap("defense", [&] { from_json(j.at("defense"), c.defense); });
  }
  if (j.contains("sweeps")) {
    check_keys(j.at("sweeps"), "sweeps", {"poison_rates", "crop_scales"});
    read_field(j.at("sweeps"), "sweeps", "poison_rates", c.sweeps.poison_rates);
    read_field(j.at("sweeps"), "sweeps", "crop_scales", c.sweeps.crop_scales);
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = detail::read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError("<file>", e.what());
  }
  Json j;
  try {
    j = Json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<file>", std::string("invalid JSON: ") + e.what());
  }
  return parse_experiment_config(j);
}

void ExperimentConfig::validate() const {
  if (trials < 1) throw ConfigError("trials", "must be >= 1");
  if (workers < 1) throw ConfigError("workers", "must be >= 1");
  if (data.source == "synthetic") {
    if (data.classes < 2) throw ConfigError("data.classes", "must be >= 2");
    if (data.image_size < 8) throw ConfigError("data.image_size", "must be >= 8");
    if (data.pretrain_per_class < 1) throw ConfigError("data.pretrain_per_class", "must be >= 1");
    if (data.downstream_train_per_class < 1) throw ConfigError("data.downstream_train_per_class", "must be >= 1");
    if (data.downstream_test_per_class < 1) throw ConfigError("data.downstream_test_per_class", "must be >= 1");
    if (data.attacker_pool_per_class < attack.references + attack.tasks * attack.targets_per_task) {
      throw ConfigError("data.attacker_pool_per_class", "too small for the requested targets and references");
    }
    check_style(data.style, "data.style");
    check_style(data.downstream_style, "data.downstream_style");
    if (data.downstream_style.colored != data.style.colored) {
      throw ConfigError("data.downstream_style.colored", "must match data.style.colored");
    }
    if (pretrain.arch.in_channels != (data.style.colored ? 3 : 1)) {
      throw ConfigError("pretrain.arch.in_channels", "does not match data.style.colored");
    }
  } else if (data.source == "files") {
    for (auto [key, p] : {std::pair{"data.pretrain_path", &data.pretrain_path},
                          std::pair{"data.downstream_train_path", &data.downstream_train_path},
                          std::pair{"data.downstream_test_path", &data.downstream_test_path},
                          std::pair{"data.attacker_pool_path", &data.attacker_pool_path}}) {
      if (p->empty()) throw ConfigError(key, "required when data.source is \"files\"");
      if (!fs::exists(*p)) throw ConfigError(key, "file does not exist: " + p->string());
    }
  } else {
    throw ConfigError("data.source", "must be \"synthetic\" or \"files\"");
  }
  if (attack.construction != "stitch" && attack.construction != "icp") {
    throw ConfigError("attack.construction", "must be \"stitch\" or \"icp\"");
  }
  if (attack.tasks < 1) throw ConfigError("attack.tasks", "must be >= 1");
  if (attack.targets_per_task < 1) throw ConfigError("attack.targets_per_task", "must be >= 1");
  if (attack.references < 1) throw ConfigError("attack.references", "must be >= 1");
  if (!(attack.poison_rate >= 0.0 && attack.poison_rate <= 1.0)) throw ConfigError("attack.poison_rate", "must lie in [0, 1]");
  if (attack.methods.empty()) throw ConfigError("attack.methods", "must be nonempty");
  std::set<int> seen;
  for (int m : attack.methods) {
    if (m < 1 || m > 4 || !seen.insert(m).second) throw ConfigError("attack.methods", "entries must be distinct values in 1..4");
  }
  if (!(attack.evasion_crop_scale > 0.0 && attack.evasion_crop_scale <= 1.0)) {
    throw ConfigError("attack.evasion_crop_scale", "must lie in (0, 1]");
  }
  if (attack.icp_steps < 2) throw ConfigError("attack.icp_steps", "must be >= 2");
  wrap("pretrain", [&] { pretrain.validate(); });
  wrap("downstream", [&] { downstream.validate(); });
  wrap("defense", [&] { defense.validate(); });
  for (std::size_t i = 0; i < defenses.size(); ++i) {
    wrap("defenses[" + std::to_string(i) + "]", [&] { defense_from_string(defenses[i]); });
  }
  for (double r : sweeps.poison_rates) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("sweeps.poison_rates", "entries must lie in [0, 1]");
  }
  for (double s : sweeps.crop_scales) {
    if (!(s > 0.0 && s <= 1.0)) throw ConfigError("sweeps.crop_scales", "entries must lie in (0, 1]");
  }
}

ExperimentConfig desk_config() {
  ExperimentConfig c;
  c.seed = 0;
  c.trials = 5;
  c.output_dir = "runs/desk";
  c.pretrain.algorithm = Algorithm::kSimclr;
  c.pretrain.temperature = 0.5;
  c.pretrain.epochs = 50;
  c.pretrain.batch_size = 64;
  c.pretrain.learning_rate = 1e-3;
  c.pretrain.arch.widths = {16, 32, 64};
  c.downstream.epochs = 100;
  c.downstream.learning_rate = 1e-3;
  c.downstream.batch_size = 64;
  c.defense.finetune_fraction = 0.5;
  return c;
}

std::uint64_t trial_seed(std::uint64_t master, int trial) {
  return derive_seed(master, {kTrialStream, static_cast<std::uint64_t>(trial)});
}

// ------------------------------------------------------------------ trials

TrialData make_trial_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  TrialData d;
  if (cfg.data.source == "files") {
    d.pretrain = [&] {
      const ContainerContents c = read_container(cfg.data.pretrain_path);
      LabeledDataset ds;
      ds.images = c.images;
      ds.labels = c.labels.empty() ? std::vector<int>(c.images.size(), 0) : c.labels;
      ds.class_names = c.class_names.empty() ? std::vector<std::string>{"unlabeled"} : c.class_names;
      return ds;
    }();
    d.downstream_train = read_labeled(cfg.data.downstream_train_path);
    d.downstream_test = read_labeled(cfg.data.downstream_test_path);
    d.attacker_pool = read_labeled(cfg.data.attacker_pool_path);
    return d;
  }
  const auto& dc = cfg.data;
  d.pretrain = generate_synthetic(dc.pretrain_per_class, dc.classes, dc.image_size, derive_seed(seed, {kDataStream, 1}), dc.style);
  d.downstream_train = generate_synthetic(dc.downstream_train_per_class, dc.classes, dc.image_size,
                                          derive_seed(seed, {kDataStream, 2}), dc.downstream_style);
  d.downstream_test = generate_synthetic(dc.downstream_test_per_class, dc.classes, dc.image_size,
                                         derive_seed(seed, {kDataStream, 3}), dc.downstream_style);
  d.attacker_pool = generate_synthetic(dc.attacker_pool_per_class, dc.classes, dc.image_size,
                                       derive_seed(seed, {kDataStream, 4}), dc.downstream_style);
  return d;
}

AttackSpec make_attack_spec(const ExperimentConfig& cfg, const LabeledDataset& pool, std::uint64_t seed,
                            std::size_t clean_size, double poison_rate, double crop_scale) {
  pool.validate();
  const int classes = pool.num_classes();
  if (classes < 2) throw std::invalid_argument("attacker pool needs at least two classes");
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < pool.size(); ++i) by_class[pool.labels[i]].push_back(i);

  Rng rng(derive_seed(seed, kAttackStream));
  std::vector<char> used(pool.size(), 0);
  AttackSpec spec;
  for (int t = 0; t < cfg.attack.tasks; ++t) {
    TargetTask task;
    for (int i = 0; i < cfg.attack.targets_per_task; ++i) {
      const int source = static_cast<int>(uniform_int(rng, 0, classes - 1));
      int target_class = static_cast<int>(uniform_int(rng, 0, classes - 2));
      if (target_class >= source) ++target_class;

      std::vector<std::size_t> free;
      for (std::size_t idx : by_class[source]) {
        if (!used[idx]) free.push_back(idx);
      }
      if (free.empty()) throw std::invalid_argument("attacker pool has no unused image left for a target");
      const std::size_t target = free[uniform_int(rng, 0, static_cast<long>(free.size()) - 1)];
      used[target] = 1;

      std::vector<std::size_t> candidates;
      for (std::size_t idx : by_class[target_class]) {
        if (!used[idx]) candidates.push_back(idx);
      }
      if (candidates.size() < static_cast<std::size_t>(cfg.attack.references)) {
        throw std::invalid_argument("attacker pool has too few reference images for the target class");
      }
      std::shuffle(candidates.begin(), candidates.end(), rng);
      std::vector<Image> refs;
      for (int r = 0; r < cfg.attack.references; ++r) refs.push_back(pool.images[candidates[r]]);

      task.targets.push_back(pool.images[target]);
      task.target_classes.push_back(target_class);
      task.references.push_back(std::move(refs));
    }
    spec.tasks.push_back(std::move(task));
  }
  spec.budget = static_cast<int>(std::lround(poison_rate * static_cast<double>(clean_size)));
  spec.methods = cfg.attack.methods;
  spec.evasion_crop_scale = crop_scale;
  spec.seed = derive_seed(seed, {kAttackStream, 1});
  spec.validate();
  return spec;
}

PoisonBatch construct_poison(const ExperimentConfig& cfg, const AttackSpec& spec) {
  return cfg.attack.construction == "icp" ? build_icp_poison(spec, cfg.attack.icp_steps) : build_poison(spec);
}

void to_json(Json& j, const TrialOutcome& t) {
  Json defenses = Json::array();
  for (const auto& [name, r] : t.defenses) defenses.push_back({{"name", name}, {"report", r}});
  j = Json{{"trial", t.trial},
           {"seed", t.seed},
           {"report", t.report},
           {"clean_epochs", epochs_json(t.clean_epochs)},
           {"poisoned_epochs", epochs_json(t.poisoned_epochs)},
           {"defenses", defenses},
           {"rate_sweep", sweep_json(t.rate_sweep)},
           {"crop_sweep", sweep_json(t.crop_sweep)}};
}

void from_json(const Json& j, TrialOutcome& t) {
  t.trial = j.at("trial").get<int>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.report = j.at("report").get<MetricsReport>();
  t.clean_epochs = epochs_from_json(j.value("clean_epochs", Json::array()));
  t.poisoned_epochs = epochs_from_json(j.value("poisoned_epochs", Json::array()));
  t.defenses.clear();
  for (const auto& d : j.value("defenses", Json::array())) {
    t.defenses.emplace_back(d.at("name").get<std::string>(), d.at("report").get<MetricsReport>());
  }
  t.rate_sweep = sweep_from_json(j.value("rate_sweep", Json::array()));
  t.crop_sweep = sweep_from_json(j.value("crop_sweep", Json::array()));
}

TrialOutcome run_trial(const ExperimentConfig& cfg, int trial, const std::optional<fs::path>& work_dir) {
  cfg.validate();
  if (work_dir) fs::create_directories(*work_dir);
  TrialOutcome out;
  out.trial = trial;
  out.seed = trial_seed(cfg.seed, trial);
  const std::uint64_t seed = out.seed;

  const TrialData data = make_trial_data(cfg, seed);
  const UnlabeledDataset clean = as_unlabeled(data.pretrain);
  PretrainConfig pcfg = cfg.pretrain;
  pcfg.seed = derive_seed(seed, {kPretrainStream, cfg.pretrain.seed});
  LinearConfig lcfg = cfg.downstream;
  lcfg.seed = derive_seed(seed, {kLinearStream, cfg.downstream.seed});

  auto poisoned_set = [&](double rate, double crop, const std::string& tag) {
    const AttackSpec spec = make_attack_spec(cfg, data.attacker_pool, seed, clean.size(), rate, crop);
    const PoisonBatch poison = construct_poison(cfg, spec);
    if (work_dir && tag == "poisoned") write_poison_batch(poison, *work_dir / "poison.penc");
    return std::pair{spec, merge_poison(clean, poison, derive_seed(seed, kMergeStream))};
  };

  const auto [spec, poisoned] = poisoned_set(cfg.attack.poison_rate, cfg.attack.evasion_crop_scale, "poisoned");
  TrainedEncoder clean_enc = train_cached(clean, pcfg, cfg, trial, "clean", work_dir);
  TrainedEncoder poisoned_enc = train_cached(poisoned, pcfg, cfg, trial, "poisoned", work_dir);
  out.clean_epochs = clean_enc.epochs;
  out.poisoned_epochs = poisoned_enc.epochs;

  const LinearClassifier clean_clf = train_linear(clean_enc.state, data.downstream_train, lcfg);
  const double ca = evaluate_accuracy(clean_clf, clean_enc.state, data.downstream_test).accuracy;
  out.report = evaluate_encoder(poisoned_enc.state, data.downstream_train, data.downstream_test, spec, lcfg, ca);
  out.report.clean_outer_objective = outer_objective(clean_enc.state, spec);
  out.report.metadata = Json{{"trial", trial},
                             {"seed", seed},
                             {"poison_budget", spec.budget},
                             {"construction", cfg.attack.construction},
                             {"target_classes", spec.tasks.front().target_classes},
                             {"feature_normalization", "none"}};
  if (cfg.attack.construction == "icp") out.report.metadata["icp_schedule"] = "evenly spaced alpha (stand-in)";

  if (!cfg.defenses.empty()) {
    DefenseInputs in;
    in.clean = clean;
    in.poisoned = poisoned;
    in.downstream_train = data.downstream_train;
    in.downstream_test = data.downstream_test;
    in.spec = spec;
    in.pretrain = pcfg;
    in.linear = lcfg;
    in.poisoned_state = poisoned_enc.state;
    in.clean_accuracy = ca;
    DefenseParams params = cfg.defense;
    params.seed = derive_seed(seed, {kDefenseStream, cfg.defense.seed});
    for (const auto& name : cfg.defenses) {
      out.defenses.emplace_back(name, run_defense_pipeline(name, in, params));
    }
  }

  auto sweep_point = [&](double rate, double crop, const std::string& tag, double x) {
    const auto [s, ds] = poisoned_set(rate, crop, tag);
    const TrainedEncoder enc = train_cached(ds, pcfg, cfg, trial, tag, work_dir);
    const LinearClassifier clf = train_linear(enc.state, data.downstream_train, lcfg);
    const std::vector<LinearClassifier> per_task(s.tasks.size(), clf);
    return SweepPoint{x, evaluate_asr(per_task, enc.state, s), outer_objective(enc.state, s)};
  };
  for (double r : cfg.sweeps.poison_rates) {
    if (r == cfg.attack.poison_rate) {
      out.rate_sweep.push_back({r, out.report.asr, out.report.outer_objective});
    } else {
      out.rate_sweep.push_back(sweep_point(r, cfg.attack.evasion_crop_scale, "rate_" + key_tag(r), r));
    }
  }
  for (double s : cfg.sweeps.crop_scales) {
    if (s == cfg.attack.evasion_crop_scale) {
      out.crop_sweep.push_back({s, out.report.asr, out.report.outer_objective});
    } else {
      out.crop_sweep.push_back(sweep_point(cfg.attack.poison_rate, s, "crop_" + key_tag(s), s));
    }
  }
  if (out.rate_sweep.empty()) out.rate_sweep.push_back({cfg.attack.poison_rate, out.report.asr, out.report.outer_objective});
  if (out.crop_sweep.empty()) {
    out.crop_sweep.push_back({cfg.attack.evasion_crop_scale, out.report.asr, out.report.outer_objective});
  }
  return out;
}

// --------------------------------------------------------------- outputs

std::string metrics_csv(const std::vector<TrialOutcome>& trials) {
  std::vector<std::string> header{"trial", "seed", "setting"};
  for (const auto& h : metrics_csv_header()) header.push_back(h);
  std::vector<std::vector<std::string>> rows;
  for (const auto& t : trials) {
    for (const auto& row : rows_of(t)) {
      std::vector<std::string> r{std::to_string(t.trial), std::to_string(t.seed), row.setting};
      for (auto& f : metrics_csv_row(*row.report)) r.push_back(std::move(f));
      rows.push_back(std::move(r));
    }
  }
  return csv_document(header, rows);
}

std::string summary_csv(const std::vector<TrialOutcome>& trials) {
  const std::vector<std::string> header{"setting", "metric", "mean", "std", "n"};
  std::vector<std::string> order;
  const auto groups = by_setting(trials, order);
  std::vector<std::vector<std::string>> rows;
  for (const auto& setting : order) {
    for (const auto& metric : kMetrics) {
      const auto values = column(groups.at(setting), metric);
      if (values.empty()) continue;
      const Spread s = spread_of(values);
      rows.push_back({setting, metric, fmt6(s.mean), fmt6(s.stddev), std::to_string(s.count)});
    }
  }
  return csv_document(header, rows);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir / "trials");
  fs::create_directories(dir / "plots");
  detail::write_text_atomic(dir / "config.json", Json(cfg).dump(2) + "\n");
  const std::string config_print = [&] {
    Json j = cfg;
    j.erase("workers");
    j.erase("output_dir");
    j.erase("trials");
    const std::string s = j.dump();
    return hex64(fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())));
  }();

  ExperimentResult result;
  result.output_dir = dir;
  result.trials.resize(static_cast<std::size_t>(cfg.trials));
  parallel_for(result.trials.size(), cfg.workers, [&](std::size_t i) {
    const int trial = static_cast<int>(i);
    const fs::path final_dir = dir / "trials" / trial_name(trial);
    const fs::path partial = dir / "trials" / (trial_name(trial) + ".partial");
    if (fs::exists(final_dir / "report.json")) {
      try {
        const Json j = read_json_file(final_dir / "report.json");
        if (j.value("config_fingerprint", std::string()) == config_print) {
          result.trials[i] = j.get<TrialOutcome>();
          return;
        }
      } catch (const std::exception&) {
        // recompute below
      }
      // Keep checkpoints from the finished directory for reuse.
      fs::create_directories(partial);
      for (const auto& e : fs::directory_iterator(final_dir)) {
        const fs::path dest = partial / e.path().filename();
        if (!fs::exists(dest)) fs::rename(e.path(), dest);
      }
      fs::remove_all(final_dir);
    }
    TrialOutcome outcome = run_trial(cfg, trial, partial);
    Json j = outcome;
    j["config_fingerprint"] = config_print;
    detail::write_text_atomic(partial / "report.json", j.dump(2) + "\n");
    fs::rename(partial, final_dir);
    result.trials[i] = std::move(outcome);
  });

  detail::write_text_atomic(dir / "metrics.csv", metrics_csv(result.trials));
  detail::write_text_atomic(dir / "summary.csv", summary_csv(result.trials));
  detail::write_text_atomic(dir / "plots" / "loss.svg", plot_loss(result.trials));
  detail::write_text_atomic(dir / "plots" / "asr_vs_rate.svg", plot_sweep(result.trials, true));
  detail::write_text_atomic(dir / "plots" / "asr_vs_crop_scale.svg", plot_sweep(result.trials, false));
  write_manifest(dir);
  return result;
}

RunReport report_run(const fs::path& run_dir) {
  RunReport rep;
  const fs::path trials_dir = run_dir / "trials";
  if (!fs::is_directory(trials_dir)) {
    rep.problems.push_back("missing directory " + trials_dir.string());
  } else {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(trials_dir)) {
      if (e.is_directory() && e.path().extension() != ".partial") dirs.push_back(e.path());
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      const fs::path f = d / "report.json";
      if (!fs::exists(f)) {
        rep.problems.push_back("missing " + f.string());
        continue;
      }
      try {
        TrialOutcome t = read_json_file(f).get<TrialOutcome>();
        t.report.validate();
        rep.trials.push_back(std::move(t));
      } catch (const std::exception& e) {
        rep.problems.push_back("corrupt " + f.string() + ": " + e.what());
      }
    }
  }
  rep.summary_csv = summary_csv(rep.trials);

  std::vector<std::string> order;
  const auto groups = by_setting(rep.trials, order);
  std::ostringstream o;
  o << "trials: " << rep.trials.size() << "\n\n";
  const std::vector<std::string> cols{"asr", "ca", "pa", "outer_objective", "clean_outer_objective", "fpr", "fnr"};
  const std::vector<std::string> titles{"ASR", "CA", "PA", "outer", "clean outer", "FPR", "FNR"};
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-22s", "setting");
  o << buf;
  for (const auto& t : titles) {
    std::snprintf(buf, sizeof buf, " %17s", t.c_str());
    o << buf;
  }
  o << "\n";
  for (const auto& setting : order) {
    std::snprintf(buf, sizeof buf, "%-22s", setting.c_str());
    o << buf;
    for (const auto& c : cols) {
      const auto values = column(groups.at(setting), c);
      if (values.empty()) {
        std::snprintf(buf, sizeof buf, " %17s", "-");
      } else {
        const Spread s = spread_of(values);
        std::snprintf(buf, sizeof buf, " %8.3f ± %6.3f", s.mean, s.stddev);
      }
      o << buf;
    }
    o << "\n";
  }
  for (const auto& p : rep.problems) o << "warning: " << p << "\n";
  rep.table = o.str();
  return rep;
}

std::vector<std::string> verify_manifest(const fs::path& run_dir) {
  std::vector<std::string> missing;
  for (const char* f : {"config.json", "metrics.csv", "summary.csv", "manifest.json", "plots/loss.svg",
                        "plots/asr_vs_rate.svg", "plots/asr_vs_crop_scale.svg"}) {
    if (!fs::exists(run_dir / f)) missing.push_back(f);
  }
  if (fs::exists(run_dir / "config.json")) {
    try {
      const Json cfg = read_json_file(run_dir / "config.json");
      const int trials = cfg.value("trials", 0);
      for (int i = 0; i < trials; ++i) {
        for (const char* f : {"report.json", "clean.penw", "poisoned.penw"}) {
          const std::string rel = "trials/" + trial_name(i) + "/" + f;
          if (!fs::exists(run_dir / rel)) missing.push_back(rel);
        }
      }
    } catch (const std::exception&) {
      missing.push_back("config.json (unreadable)");
    }
  }
  if (fs::exists(run_dir / "manifest.json")) {
    try {
      const Json m = read_json_file(run_dir / "manifest.json");
      for (const auto& f : m.at("files")) {
        const fs::path p = run_dir / f.at("path").get<std::string>();
        if (!fs::exists(p) || fs::file_size(p) != f.at("bytes").get<std::uintmax_t>()) {
          missing.push_back(f.at("path").get<std::string>());
        }
      }
    } catch (const std::exception&) {
      missing.push_back("manifest.json (unreadable)");
    }
  }
  return missing;
}

}  // namespace poisonlab
