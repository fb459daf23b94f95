#include "poisonlab/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "poisonlab/errors.hpp"
#include "poisonlab/rng.hpp"

namespace poisonlab {
namespace {

using Json = nlohmann::json;

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

Eigen::VectorXd softmax_row(const Eigen::VectorXd& z) {
  const Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

}  // namespace

Eigen::MatrixXd extract_features(const EncoderState& state, std::span<const Image> images) {
  if (images.empty()) return Eigen::MatrixXd(0, state.arch.feature_dim);
  const ImageShape shape = common_shape(images);
  if (shape.channels != state.arch.in_channels) {
    throw std::invalid_argument("image channels do not match the encoder input");
  }
  return forward_features(state, images).cast<double>();
}

Eigen::MatrixXd extract_features(const EncoderState& state, const LabeledDataset& ds) {
  return extract_features(state, std::span<const Image>(ds.images));
}

void LinearClassifier::validate() const {
  if (biases.size() < 2) throw std::invalid_argument("classifier needs at least 2 classes");
  if (weights.cols() != biases.size()) throw std::invalid_argument("classifier weight/bias mismatch");
  if (!weights.allFinite() || !biases.allFinite()) throw NumericalDomainError("non-finite classifier parameters");
}

Eigen::MatrixXd LinearClassifier::logits(const Eigen::MatrixXd& features) const {
  if (features.cols() != weights.rows()) throw std::invalid_argument("feature width does not match classifier");
  Eigen::MatrixXd out = features * weights;
  out.rowwise() += biases.transpose();
  return out;
}

std::vector<int> LinearClassifier::predict(const Eigen::MatrixXd& features) const {
  const Eigen::MatrixXd z = logits(features);
  std::vector<int> out(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < z.cols(); ++c) {
      if (z(i, c) > z(i, best)) best = c;
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

int LinearClassifier::predict_one(const Eigen::VectorXd& feature) const {
  return predict(feature.transpose()).front();
}

void LinearConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("linear epochs must be >= 0");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("linear learning_rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("linear batch_size must be >= 1");
}

void to_json(Json& j, const LinearConfig& cfg) {
  j = Json{{"epochs", cfg.epochs}, {"learning_rate", cfg.learning_rate}, {"batch_size", cfg.batch_size},
           {"seed", cfg.seed}};
}

void from_json(const Json& j, LinearConfig& cfg) {
  LinearConfig d;
  cfg.epochs = j.value("epochs", d.epochs);
  cfg.learning_rate = j.value("learning_rate", d.learning_rate);
  cfg.batch_size = j.value("batch_size", d.batch_size);
  cfg.seed = j.value("seed", d.seed);
}

LinearClassifier train_linear(const Eigen::MatrixXd& features, std::span<const int> labels,
                              const LinearConfig& cfg, int num_classes,
                              std::vector<std::string> class_names) {
  cfg.validate();
  const Eigen::Index n = features.rows(), d = features.cols();
  if (static_cast<std::size_t>(n) != labels.size()) throw std::invalid_argument("features/labels length mismatch");
  if (d < 1) throw std::invalid_argument("features must have at least one column");
  int max_label = -1;
  for (int y : labels) {
    if (y < 0) throw std::invalid_argument("class index out of range");
    max_label = std::max(max_label, y);
  }
  const int c = num_classes > 0 ? num_classes : std::max(2, max_label + 1);
  if (max_label >= c) throw std::invalid_argument("class index out of range");
  if (c < 2) throw std::invalid_argument("classifier needs at least 2 classes");
  if (n < c) throw std::invalid_argument("need at least as many training rows as classes");
  if (!features.allFinite()) throw NumericalDomainError("non-finite training features");

  Rng rng(derive_seed(cfg.seed, 0x4c494e454152ULL));
  LinearClassifier clf;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  clf.weights.resize(d, c);
  for (Eigen::Index i = 0; i < clf.weights.size(); ++i) clf.weights.data()[i] = uniform(rng, -bound, bound);
  clf.biases = Eigen::VectorXd::Zero(c);
  clf.class_names = std::move(class_names);
  if (clf.class_names.empty()) {
    for (int k = 0; k < c; ++k) clf.class_names.push_back("class" + std::to_string(k));
  }

  // Adam state for [weights | biases].
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Eigen::MatrixXd mw = Eigen::MatrixXd::Zero(d, c), vw = mw;
  Eigen::VectorXd mb = Eigen::VectorXd::Zero(c), vb = mb;
  long t = 0;

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
      const Eigen::Index end = std::min<Eigen::Index>(n, start + cfg.batch_size);
      const Eigen::Index b = end - start;
      Eigen::MatrixXd x(b, d);
      for (Eigen::Index r = 0; r < b; ++r) x.row(r) = features.row(order[start + r]);
      Eigen::MatrixXd g = clf.logits(x);
      for (Eigen::Index r = 0; r < b; ++r) {
        g.row(r) = softmax_row(g.row(r).transpose()).transpose();
        g(r, labels[order[start + r]]) -= 1.0;
      }
      g /= static_cast<double>(b);
      const Eigen::MatrixXd gw = x.transpose() * g;
      const Eigen::VectorXd gb = g.colwise().sum().transpose();

      ++t;
      const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
      mw = b1 * mw + (1 - b1) * gw;
      vw = b2 * vw + (1 - b2) * gw.cwiseAbs2();
      mb = b1 * mb + (1 - b1) * gb;
      vb = b2 * vb + (1 - b2) * gb.cwiseAbs2();
      clf.weights.array() -= cfg.learning_rate * (mw.array() / c1) / ((vw.array() / c2).sqrt() + eps);
      clf.biases.array() -= cfg.learning_rate * (mb.array() / c1) / ((vb.array() / c2).sqrt() + eps);
    }
  }
  return clf;
}

LinearClassifier train_linear(const EncoderState& state, const LabeledDataset& ds, const LinearConfig& cfg) {
  ds.validate();
  return train_linear(extract_features(state, ds), ds.labels, cfg, ds.num_classes(), ds.class_names);
}

AccuracyResult accuracy_of(std::span<const int> predictions, std::span<const int> labels, int num_classes) {
  if (labels.empty()) throw std::invalid_argument("accuracy of an empty test set");
  if (predictions.size() != labels.size()) throw std::invalid_argument("predictions/labels length mismatch");
  AccuracyResult r;
  r.total = labels.size();
  r.per_class.assign(static_cast<std::size_t>(num_classes), 0.0);
  r.per_class_total.assign(static_cast<std::size_t>(num_classes), 0);
  std::vector<std::size_t> hit(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= num_classes) throw std::invalid_argument("class index out of range");
    ++r.per_class_total[y];
    if (predictions[i] == y) {
      ++r.correct;
      ++hit[y];
    }
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  for (int c = 0; c < num_classes; ++c) {
    if (r.per_class_total[c] > 0) r.per_class[c] = static_cast<double>(hit[c]) / r.per_class_total[c];
  }
  return r;
}

AccuracyResult evaluate_accuracy(const LinearClassifier& clf, const Eigen::MatrixXd& features,
                                 std::span<const int> labels) {
  if (labels.empty()) throw std::invalid_argument("accuracy of an empty test set");
  return accuracy_of(clf.predict(features), labels, clf.num_classes());
}

AccuracyResult evaluate_accuracy(const LinearClassifier& clf, const EncoderState& state,
                                 const LabeledDataset& test) {
  if (test.size() == 0) throw std::invalid_argument("accuracy of an empty test set");
  return evaluate_accuracy(clf, extract_features(state, test), test.labels);
}

double asr_of(std::span<const int> predictions, std::span<const int> target_classes) {
  if (predictions.size() != target_classes.size()) throw std::invalid_argument("predictions/targets length mismatch");
  if (predictions.empty()) throw std::invalid_argument("attack success rate needs at least one target");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) hit += predictions[i] == target_classes[i];
  return static_cast<double>(hit) / static_cast<double>(predictions.size());
}

double evaluate_asr(std::span<const LinearClassifier> classifiers, const EncoderState& state,
                    const AttackSpec& spec) {
  if (classifiers.size() < spec.tasks.size()) throw std::invalid_argument("missing classifier for a target task");
  std::vector<int> predictions, wanted;
  for (std::size_t t = 0; t < spec.tasks.size(); ++t) {
    const auto& task = spec.tasks[t];
    const auto pred = classifiers[t].predict(extract_features(state, task.targets));
    predictions.insert(predictions.end(), pred.begin(), pred.end());
    wanted.insert(wanted.end(), task.target_classes.begin(), task.target_classes.end());
  }
  return asr_of(predictions, wanted);
}

double outer_objective(const EncoderState& state, const AttackSpec& spec) {
  spec.validate();
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& task : spec.tasks) {
    const Eigen::MatrixXd ft = extract_features(state, task.targets);
    for (std::size_t i = 0; i < task.targets.size(); ++i) {
      const Eigen::MatrixXd fr = extract_features(state, task.references[i]);
      const double nt = ft.row(static_cast<Eigen::Index>(i)).norm();
      if (!(nt > 0.0)) throw NumericalDomainError("zero target feature vector");
      for (Eigen::Index r = 0; r < fr.rows(); ++r) {
        const double nr = fr.row(r).norm();
        if (!(nr > 0.0)) throw NumericalDomainError("zero reference feature vector");
        sum += std::clamp(ft.row(static_cast<Eigen::Index>(i)).dot(fr.row(r)) / (nt * nr), -1.0, 1.0);
        ++count;
      }
    }
  }
  return sum / static_cast<double>(count);
}

void MetricsReport::validate() const {
  auto frac = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string(name) + " must lie in [0, 1]");
  };
  frac(asr, "asr");
  frac(ca, "ca");
  frac(pa, "pa");
  for (double v : per_class_accuracy) frac(v, "per_class_accuracy");
  if (fpr) frac(*fpr, "fpr");
  if (fnr) frac(*fnr, "fnr");
  if (!(outer_objective >= -1.0 && outer_objective <= 1.0)) {
    throw std::invalid_argument("outer_objective must lie in [-1, 1]");
  }
}

void to_json(Json& j, const MetricsReport& r) {
  j = Json{{"asr", r.asr},
           {"ca", r.ca},
           {"pa", r.pa},
           {"outer_objective", r.outer_objective},
           {"per_class_accuracy", r.per_class_accuracy},
           {"metadata", r.metadata}};
  j["clean_outer_objective"] = r.clean_outer_objective ? Json(*r.clean_outer_objective) : Json(nullptr);
  j["fpr"] = r.fpr ? Json(*r.fpr) : Json(nullptr);
  j["fnr"] = r.fnr ? Json(*r.fnr) : Json(nullptr);
}

void from_json(const Json& j, MetricsReport& r) {
  auto opt = [&](const char* key) -> std::optional<double> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
  };
  r.asr = j.at("asr").get<double>();
  r.ca = j.at("ca").get<double>();
  r.pa = j.at("pa").get<double>();
  r.outer_objective = j.at("outer_objective").get<double>();
  r.clean_outer_objective = opt("clean_outer_objective");
  r.per_class_accuracy = j.value("per_class_accuracy", std::vector<double>{});
  r.fpr = opt("fpr");
  r.fnr = opt("fnr");
  r.metadata = j.value("metadata", Json::object());
}

std::vector<std::string> metrics_csv_header() {
  return {"asr", "ca", "pa", "outer_objective", "clean_outer_objective", "fpr", "fnr"};
}

std::vector<std::string> metrics_csv_row(const MetricsReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  return {fmt(r.asr), fmt(r.ca), fmt(r.pa), fmt(r.outer_objective), opt(r.clean_outer_objective),
          opt(r.fpr), opt(r.fnr)};
}

}  // namespace poisonlab
