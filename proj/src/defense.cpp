#include "poisonlab/defense.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

#include "poisonlab/data.hpp"
#include "poisonlab/rng.hpp"

namespace poisonlab {
namespace {

using Json = nlohmann::json;

constexpr std::uint64_t kBagStream = 0x424147ULL;

Eigen::MatrixXd flatten(std::span<const Image> images) {
  if (images.empty()) return {};
  const std::size_t dim = images.front().size();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto px = images[i].pixels();
    for (std::size_t d = 0; d < dim; ++d) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = px[d];
  }
  return out;
}

UnlabeledDataset select(const UnlabeledDataset& ds, std::span<const std::size_t> keep) {
  UnlabeledDataset out;
  out.images.reserve(keep.size());
  out.provenance.reserve(keep.size());
  for (std::size_t i : keep) {
    out.images.push_back(ds.images.at(i));
    out.provenance.push_back(ds.provenance.at(i));
  }
  return out;
}

template <class Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min<int>(workers, static_cast<int>(n)); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

FprFnr compute_fpr_fnr(std::span<const std::size_t> flagged, std::span<const Provenance> provenance) {
  std::vector<char> mark(provenance.size(), 0);
  for (std::size_t i : flagged) {
    if (i >= provenance.size()) throw std::invalid_argument("flagged index outside the dataset");
    mark[i] = 1;
  }
  std::size_t clean = 0, poison = 0, clean_flagged = 0, poison_missed = 0;
  for (std::size_t i = 0; i < provenance.size(); ++i) {
    if (provenance[i] == Provenance::kPoison) {
      ++poison;
      poison_missed += !mark[i];
    } else {
      ++clean;
      clean_flagged += mark[i];
    }
  }
  FprFnr out;
  if (clean > 0) out.fpr = static_cast<double>(clean_flagged) / static_cast<double>(clean);
  if (poison > 0) out.fnr = static_cast<double>(poison_missed) / static_cast<double>(poison);
  return out;
}

KMeansResult kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed, int max_iterations,
                    double tolerance) {
  const Eigen::Index n = points.rows();
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  if (k > n) throw std::invalid_argument("k_clusters exceeds the number of points");
  Rng rng(derive_seed(seed, 0x4b4d45414e53ULL));

  KMeansResult r;
  r.centroids.resize(k, points.cols());
  Eigen::VectorXd nearest = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  Eigen::Index first = uniform_int(rng, 0, static_cast<long>(n) - 1);
  r.centroids.row(0) = points.row(first);
  for (int c = 1; c < k; ++c) {
    nearest = nearest.cwiseMin((points.rowwise() - r.centroids.row(c - 1)).rowwise().squaredNorm());
    const double total = nearest.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double u = uniform(rng, 0.0, total);
      for (pick = 0; pick < n - 1; ++pick) {
        u -= nearest(pick);
        if (u < 0.0) break;
      }
      while (nearest(pick) == 0.0 && pick > 0) --pick;  // never reseed on an existing centroid
    } else {
      pick = uniform_int(rng, 0, static_cast<long>(n) - 1);
    }
    r.centroids.row(c) = points.row(pick);
  }

  const Eigen::VectorXd point_sq = points.rowwise().squaredNorm();
  r.assignment.assign(static_cast<std::size_t>(n), 0);
  for (int it = 0; it < max_iterations; ++it) {
    r.iterations = it + 1;
    const Eigen::MatrixXd cross = points * r.centroids.transpose();
    const Eigen::VectorXd cent_sq = r.centroids.rowwise().squaredNorm();
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = point_sq(i) + cent_sq(c) - 2.0 * cross(i, c);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      r.assignment[static_cast<std::size_t>(i)] = best;
    }
    Eigen::MatrixXd next = Eigen::MatrixXd::Zero(k, points.cols());
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      next.row(r.assignment[i]) += points.row(i);
      ++counts[r.assignment[i]];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) next.row(c) /= static_cast<double>(counts[c]);
      else next.row(c) = r.centroids.row(c);  // empty clusters keep their centroid
    }
    const double shift = (next - r.centroids).rowwise().norm().maxCoeff();
    r.centroids = std::move(next);
    if (shift < tolerance) break;
  }
  return r;
}

double mean_pairwise_distance(const Eigen::MatrixXd& rows) {
  const Eigen::Index n = rows.rows();
  if (n < 2) return std::numeric_limits<double>::infinity();
  const Eigen::MatrixXd gram = rows * rows.transpose();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      sum += std::sqrt(std::max(0.0, gram(i, i) + gram(j, j) - 2.0 * gram(i, j)));
    }
  }
  return sum / (static_cast<double>(n) * static_cast<double>(n - 1) / 2.0);
}

void to_json(Json& j, const DetectionResult& r) {
  Json stats = Json::array();
  for (const auto& s : r.cluster_stats) {
    stats.push_back({{"size", s.size},
                     {"mean_pairwise_distance",
                      std::isfinite(s.mean_pairwise_distance) ? Json(s.mean_pairwise_distance) : Json(nullptr)}});
  }
  j = Json{{"flagged_indices", r.flagged_indices},
           {"flagged_clusters", r.flagged_clusters},
           {"fpr", r.fpr},
           {"fnr", r.fnr ? Json(*r.fnr) : Json(nullptr)},
           {"cluster_stats", stats}};
}

DetectionResult kmeans_detect(const UnlabeledDataset& ds, int k_clusters, int n_flagged, std::uint64_t seed) {
  ds.validate();
  if (k_clusters < 1 || static_cast<std::size_t>(k_clusters) > ds.size()) {
    throw std::invalid_argument("k_clusters must lie in [1, dataset size]");
  }
  if (n_flagged < 0 || n_flagged > k_clusters) throw std::invalid_argument("n_flagged must lie in [0, k_clusters]");

  const Eigen::MatrixXd points = flatten(ds.images);
  const KMeansResult km = kmeans(points, k_clusters, seed);

  DetectionResult out;
  out.assignment = km.assignment;
  std::vector<std::vector<Eigen::Index>> members(static_cast<std::size_t>(k_clusters));
  for (std::size_t i = 0; i < km.assignment.size(); ++i) members[km.assignment[i]].push_back(static_cast<Eigen::Index>(i));
  for (const auto& m : members) {
    Eigen::MatrixXd rows(static_cast<Eigen::Index>(m.size()), points.cols());
    for (std::size_t r = 0; r < m.size(); ++r) rows.row(static_cast<Eigen::Index>(r)) = points.row(m[r]);
    out.cluster_stats.push_back({m.size(), mean_pairwise_distance(rows)});
  }

  std::vector<int> order(static_cast<std::size_t>(k_clusters));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return out.cluster_stats[a].mean_pairwise_distance < out.cluster_stats[b].mean_pairwise_distance;
  });
  out.flagged_clusters.assign(order.begin(), order.begin() + n_flagged);
  std::sort(out.flagged_clusters.begin(), out.flagged_clusters.end());
  for (int c : out.flagged_clusters) {
    for (Eigen::Index i : members[c]) out.flagged_indices.push_back(static_cast<std::size_t>(i));
  }
  std::sort(out.flagged_indices.begin(), out.flagged_indices.end());
  const FprFnr rates = compute_fpr_fnr(out.flagged_indices, ds.provenance);
  out.fpr = rates.fpr;
  out.fnr = rates.fnr;
  return out;
}

int BaggingEnsemble::num_classes() const {
  if (base_classifiers.empty()) throw std::invalid_argument("empty ensemble");
  return base_classifiers.front().num_classes();
}

void BaggingEnsemble::validate() const {
  if (base_classifiers.empty()) throw std::invalid_argument("ensemble needs at least one base classifier");
  if (base_states.size() != base_classifiers.size()) throw std::invalid_argument("ensemble states/classifiers mismatch");
  for (const auto& c : base_classifiers) {
    if (c.num_classes() != num_classes()) throw std::invalid_argument("ensemble classifiers disagree on class count");
  }
}

std::vector<std::size_t> bagging_subsample(std::size_t dataset_size, std::size_t subsample_size,
                                           std::uint64_t seed, std::size_t base) {
  if (subsample_size > dataset_size) throw std::invalid_argument("subsample larger than dataset");
  Rng rng(derive_seed(seed, {kBagStream, base, 0}));
  std::vector<std::size_t> idx(dataset_size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < subsample_size; ++i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, static_cast<long>(i), static_cast<long>(dataset_size) - 1));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(subsample_size);
  std::sort(idx.begin(), idx.end());
  return idx;
}

BaggingEnsemble bagging_train(const UnlabeledDataset& ds, int n_subsamples, int subsample_size,
                              const PretrainConfig& pre_cfg, const LabeledDataset& downstream,
                              const LinearConfig& down_cfg, std::uint64_t seed, int workers) {
  if (n_subsamples < 1) throw std::invalid_argument("bagging needs at least one subsample");
  if (subsample_size < 1 || static_cast<std::size_t>(subsample_size) > ds.size()) {
    throw std::invalid_argument("subsample larger than dataset");
  }
  const auto n = static_cast<std::size_t>(n_subsamples);
  BaggingEnsemble ens;
  ens.base_states.resize(n);
  ens.base_classifiers.resize(n);
  ens.subsample_indices.resize(n);
  parallel_for(n, workers, [&](std::size_t b) {
    ens.subsample_indices[b] = bagging_subsample(ds.size(), static_cast<std::size_t>(subsample_size), seed, b);
    PretrainConfig cfg = pre_cfg;
    cfg.seed = derive_seed(seed, {kBagStream, b, 1});
    auto result = pretrain(select(ds, ens.subsample_indices[b]), cfg);
    result.state.history.push_back("bagging:base=" + std::to_string(b));
    LinearConfig lc = down_cfg;
    lc.seed = derive_seed(seed, {kBagStream, b, 2});
    ens.base_classifiers[b] = train_linear(result.state, downstream, lc);
    ens.base_states[b] = std::move(result.state);
  });
  return ens;
}

int plurality_vote(std::span<const int> votes, int num_classes) {
  if (votes.empty()) throw std::invalid_argument("plurality vote needs at least one vote");
  std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
  for (int v : votes) {
    if (v < 0 || v >= num_classes) throw std::invalid_argument("vote outside the class range");
    ++counts[v];
  }
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

std::vector<int> bagging_predict(const BaggingEnsemble& ensemble, std::span<const Image> images) {
  ensemble.validate();
  std::vector<std::vector<int>> per_base;
  for (std::size_t b = 0; b < ensemble.size(); ++b) {
    per_base.push_back(ensemble.base_classifiers[b].predict(extract_features(ensemble.base_states[b], images)));
  }
  std::vector<int> out(images.size());
  std::vector<int> votes(ensemble.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (std::size_t b = 0; b < ensemble.size(); ++b) votes[b] = per_base[b][i];
    out[i] = plurality_vote(votes, ensemble.num_classes());
  }
  return out;
}

int bagging_predict(const BaggingEnsemble& ensemble, const Image& img) {
  return bagging_predict(ensemble, std::span<const Image>(&img, 1)).front();
}

const char* to_string(DefenseKind d) {
  switch (d) {
    case DefenseKind::kDedupKmeans: return "dedup_kmeans";
    case DefenseKind::kEarlyStop: return "early_stop";
    case DefenseKind::kBagging: return "bagging";
    case DefenseKind::kNoCrop: return "no_crop";
    case DefenseKind::kFinetune: return "finetune";
  }
  return "?";
}

DefenseKind defense_from_string(const std::string& name) {
  for (auto d : {DefenseKind::kDedupKmeans, DefenseKind::kEarlyStop, DefenseKind::kBagging, DefenseKind::kNoCrop,
                 DefenseKind::kFinetune}) {
    if (name == to_string(d)) return d;
  }
  throw std::invalid_argument("unknown defense '" + name + "'");
}

void DefenseParams::validate() const {
  if (kmeans_clusters < 1) throw std::invalid_argument("kmeans_clusters must be >= 1");
  if (kmeans_flagged < 0 || kmeans_flagged > kmeans_clusters) {
    throw std::invalid_argument("kmeans_flagged must lie in [0, kmeans_clusters]");
  }
  if (early_stop_epochs < 0) throw std::invalid_argument("early_stop_epochs must be >= 0");
  if (bagging_subsamples < 1) throw std::invalid_argument("bagging_subsamples must be >= 1");
  if (bagging_subsample_size < 1) throw std::invalid_argument("bagging_subsample_size must be >= 1");
  if (!(finetune_fraction >= 0.0 && finetune_fraction <= 1.0)) {
    throw std::invalid_argument("finetune_fraction must lie in [0, 1]");
  }
  if (finetune_epochs && *finetune_epochs < 0) throw std::invalid_argument("finetune_epochs must be >= 0");
  if (!(finetune_learning_rate > 0.0)) throw std::invalid_argument("finetune_learning_rate must be > 0");
  if (workers < 1) throw std::invalid_argument("workers must be >= 1");
}

void to_json(Json& j, const DefenseParams& p) {
  j = Json{{"kmeans_clusters", p.kmeans_clusters},
           {"kmeans_flagged", p.kmeans_flagged},
           {"early_stop_epochs", p.early_stop_epochs},
           {"bagging_subsamples", p.bagging_subsamples},
           {"bagging_subsample_size", p.bagging_subsample_size},
           {"finetune_fraction", p.finetune_fraction},
           {"finetune_epochs", p.finetune_epochs ? Json(*p.finetune_epochs) : Json(nullptr)},
           {"finetune_learning_rate", p.finetune_learning_rate},
           {"workers", p.workers},
           {"seed", p.seed}};
}

void from_json(const Json& j, DefenseParams& p) {
  DefenseParams d;
  p.kmeans_clusters = j.value("kmeans_clusters", d.kmeans_clusters);
  p.kmeans_flagged = j.value("kmeans_flagged", d.kmeans_flagged);
  p.early_stop_epochs = j.value("early_stop_epochs", d.early_stop_epochs);
  p.bagging_subsamples = j.value("bagging_subsamples", d.bagging_subsamples);
  p.bagging_subsample_size = j.value("bagging_subsample_size", d.bagging_subsample_size);
  p.finetune_fraction = j.value("finetune_fraction", d.finetune_fraction);
  if (j.contains("finetune_epochs") && !j.at("finetune_epochs").is_null()) {
    p.finetune_epochs = j.at("finetune_epochs").get<int>();
  } else {
    p.finetune_epochs.reset();
  }
  p.finetune_learning_rate = j.value("finetune_learning_rate", d.finetune_learning_rate);
  p.workers = j.value("workers", d.workers);
  p.seed = j.value("seed", d.seed);
}

MetricsReport evaluate_encoder(const EncoderState& state, const LabeledDataset& train,
                               const LabeledDataset& test, const AttackSpec& spec,
                               const LinearConfig& linear, double clean_accuracy) {
  const LinearClassifier clf = train_linear(state, train, linear);
  const AccuracyResult acc = evaluate_accuracy(clf, state, test);
  const std::vector<LinearClassifier> per_task(spec.tasks.size(), clf);
  MetricsReport r;
  r.pa = acc.accuracy;
  r.per_class_accuracy = acc.per_class;
  r.ca = clean_accuracy;
  r.asr = evaluate_asr(per_task, state, spec);
  r.outer_objective = outer_objective(state, spec);
  return r;
}

namespace {

MetricsReport bagging_report(const DefenseInputs& in, const DefenseParams& p) {
  const BaggingEnsemble ens = bagging_train(in.poisoned, p.bagging_subsamples, p.bagging_subsample_size,
                                            in.pretrain, in.downstream_train, in.linear, p.seed, p.workers);
  const auto pred = bagging_predict(ens, in.downstream_test.images);
  const AccuracyResult acc = accuracy_of(pred, in.downstream_test.labels, ens.num_classes());
  std::vector<int> target_pred, wanted;
  for (const auto& task : in.spec.tasks) {
    const auto tp = bagging_predict(ens, task.targets);
    target_pred.insert(target_pred.end(), tp.begin(), tp.end());
    wanted.insert(wanted.end(), task.target_classes.begin(), task.target_classes.end());
  }
  MetricsReport r;
  r.pa = acc.accuracy;
  r.per_class_accuracy = acc.per_class;
  r.ca = in.clean_accuracy;
  r.asr = asr_of(target_pred, wanted);
  double outer = 0.0;
  for (const auto& s : ens.base_states) outer += outer_objective(s, in.spec);
  r.outer_objective = outer / static_cast<double>(ens.size());
  r.metadata["outer_objective"] = "mean over base encoders";
  return r;
}

}  // namespace

MetricsReport run_defense_pipeline(DefenseKind kind, const DefenseInputs& in, const DefenseParams& p) {
  p.validate();
  MetricsReport r;
  switch (kind) {
    case DefenseKind::kDedupKmeans: {
      const DedupResult dd = dedup(in.poisoned);
      const DetectionResult det = kmeans_detect(dd.dataset, p.kmeans_clusters, p.kmeans_flagged, p.seed);
      std::vector<char> drop(dd.dataset.size(), 0);
      for (std::size_t i : det.flagged_indices) drop[i] = 1;
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < dd.dataset.size(); ++i) {
        if (!drop[i]) keep.push_back(i);
      }
      const UnlabeledDataset filtered = select(dd.dataset, keep);
      const EncoderState state = pretrain(filtered, in.pretrain).state;
      r = evaluate_encoder(state, in.downstream_train, in.downstream_test, in.spec, in.linear, in.clean_accuracy);
      r.fpr = det.fpr;
      r.fnr = det.fnr;
      r.metadata["duplicates_removed"] = dd.removed_indices.size();
      r.metadata["flagged"] = det.flagged_indices.size();
      r.metadata["retained"] = filtered.size();
      r.metadata["rates_computed_on"] = "deduplicated dataset";
      break;
    }
    case DefenseKind::kEarlyStop: {
      PretrainConfig cfg = in.pretrain;
      cfg.epochs = p.early_stop_epochs;
      const EncoderState state = pretrain(in.poisoned, cfg).state;
      r = evaluate_encoder(state, in.downstream_train, in.downstream_test, in.spec, in.linear, in.clean_accuracy);
      r.metadata["epochs"] = cfg.epochs;
      break;
    }
    case DefenseKind::kBagging:
      r = bagging_report(in, p);
      r.metadata["subsamples"] = p.bagging_subsamples;
      r.metadata["subsample_size"] = p.bagging_subsample_size;
      break;
    case DefenseKind::kNoCrop: {
      PretrainConfig cfg = in.pretrain;
      cfg.augment.enable_crop = false;
      const EncoderState state = pretrain(in.poisoned, cfg).state;
      r = evaluate_encoder(state, in.downstream_train, in.downstream_test, in.spec, in.linear, in.clean_accuracy);
      r.metadata["enable_crop"] = false;
      break;
    }
    case DefenseKind::kFinetune: {
      EncoderState state = in.poisoned_state ? *in.poisoned_state : pretrain(in.poisoned, in.pretrain).state;
      const auto n = static_cast<std::size_t>(std::floor(p.finetune_fraction * static_cast<double>(in.clean.size())));
      const int epochs = p.finetune_epochs.value_or(in.pretrain.epochs);
      if (n > 0 && epochs > 0) {
        const auto idx = bagging_subsample(in.clean.size(), n, p.seed, 0x46494e45ULL);
        PretrainConfig cfg = in.pretrain;
        cfg.epochs = epochs;
        cfg.learning_rate = p.finetune_learning_rate;
        cfg.seed = derive_seed(p.seed, 0x46494e45ULL);
        state = finetune(state, select(in.clean, idx), cfg).state;
      }
      r = evaluate_encoder(state, in.downstream_train, in.downstream_test, in.spec, in.linear, in.clean_accuracy);
      r.metadata["clean_images"] = n;
      r.metadata["epochs"] = epochs;
      r.metadata["learning_rate"] = p.finetune_learning_rate;
      break;
    }
  }
  r.metadata["defense"] = to_string(kind);
  return r;
}

MetricsReport run_defense_pipeline(const std::string& name, const DefenseInputs& inputs,
                                   const DefenseParams& params) {
  return run_defense_pipeline(defense_from_string(name), inputs, params);
}

}  // namespace poisonlab
