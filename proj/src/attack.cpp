#include "poisonlab/attack.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "byte_io.hpp"
#include "poisonlab/data.hpp"
#include "poisonlab/errors.hpp"
#include "poisonlab/pretrain.hpp"

namespace poisonlab {
namespace {

using Json = nlohmann::json;

constexpr std::uint64_t kPoisonStream = 0x504f49534f4eULL;
constexpr std::uint64_t kIcpStream = 0x494350ULL;

struct TargetRef {
  int task;
  int target;
};

std::vector<TargetRef> flatten_targets(const AttackSpec& spec) {
  std::vector<TargetRef> out;
  for (std::size_t t = 0; t < spec.tasks.size(); ++t) {
    for (std::size_t i = 0; i < spec.tasks[t].targets.size(); ++i) {
      out.push_back({static_cast<int>(t), static_cast<int>(i)});
    }
  }
  return out;
}

Image stack(const Image& first, const Image& second, bool vertical) {
  const int h = first.height(), w = first.width(), c = first.channels();
  Image out = vertical ? Image(2 * h, w, c) : Image(h, 2 * w, c);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        out.at(y, x, ch) = first.at(y, x, ch);
        if (vertical) {
          out.at(h + y, x, ch) = second.at(y, x, ch);
        } else {
          out.at(y, w + x, ch) = second.at(y, x, ch);
        }
      }
    }
  }
  return out;
}

Json crop_json(const CropOffsets& c) { return Json{{"y", c.y}, {"x", c.x}, {"side", c.side}}; }

CropOffsets crop_from_json(const Json& j) {
  return {j.value("y", 0), j.value("x", 0), j.value("side", 0)};
}

template <class T>
std::vector<double> to_double(const std::vector<T>& v) {
  return std::vector<double>(v.begin(), v.end());
}

}  // namespace

void AttackSpec::validate() const {
  if (tasks.empty()) throw std::invalid_argument("attack needs at least one target task");
  if (budget < 0) throw std::invalid_argument("attack budget must be >= 0");
  if (methods.empty()) throw std::invalid_argument("attack methods must be nonempty");
  std::set<int> seen;
  for (int m : methods) {
    if (m < 1 || m > 4) throw std::invalid_argument("combination method must be 1, 2, 3 or 4");
    if (!seen.insert(m).second) throw std::invalid_argument("duplicate combination method");
  }
  if (!(evasion_crop_scale > 0.0 && evasion_crop_scale <= 1.0)) {
    throw std::invalid_argument("evasion_crop_scale must lie in (0, 1]");
  }
  std::vector<Image> all;
  for (const auto& task : tasks) {
    if (task.targets.empty()) throw std::invalid_argument("every task needs at least one target");
    if (task.target_classes.size() != task.targets.size() ||
        task.references.size() != task.targets.size()) {
      throw std::invalid_argument("targets, target classes and reference sets must align");
    }
    for (const auto& refs : task.references) {
      if (refs.empty()) throw std::invalid_argument("every reference set must be nonempty");
      all.insert(all.end(), refs.begin(), refs.end());
    }
    all.insert(all.end(), task.targets.begin(), task.targets.end());
  }
  const ImageShape shape = common_shape(all);
  if (shape.height != shape.width) throw std::invalid_argument("attack images must be square");
}

int AttackSpec::total_targets() const {
  int n = 0;
  for (const auto& t : tasks) n += static_cast<int>(t.targets.size());
  return n;
}

ImageShape AttackSpec::working_shape() const { return common_shape(tasks.at(0).targets); }

Image combine(const Image& target, const Image& reference, int method, int out_size) {
  if (!target.same_shape(reference)) throw std::invalid_argument("target and reference shapes differ");
  Image joined;
  switch (method) {
    case 1: joined = stack(target, reference, true); break;
    case 2: joined = stack(reference, target, true); break;
    case 3: joined = stack(target, reference, false); break;
    case 4: joined = stack(reference, target, false); break;
    default: throw std::invalid_argument("combination method must be 1, 2, 3 or 4");
  }
  return rescale(joined, out_size);
}

EvasionCrop evasion_crop(const Image& img, double crop_scale, Rng& rng) {
  if (!(crop_scale > 0.0 && crop_scale <= 1.0)) throw std::invalid_argument("crop scale must lie in (0, 1]");
  const int base = std::min(img.height(), img.width());
  const int side = std::max(1, static_cast<int>(std::floor(std::sqrt(crop_scale) * base)));
  EvasionCrop out;
  out.offsets.side = side;
  out.offsets.y = static_cast<int>(uniform_int(rng, 0, img.height() - side));
  out.offsets.x = static_cast<int>(uniform_int(rng, 0, img.width() - side));
  if (side == img.height() && side == img.width()) {
    out.image = img;
  } else {
    out.image = resize(crop(img, {out.offsets.y, out.offsets.x, side, side}), img.height(), img.width());
  }
  return out;
}

PoisonBatch build_poison(const AttackSpec& spec) {
  spec.validate();
  const auto targets = flatten_targets(spec);
  const int out_size = spec.working_shape().height;

  PoisonBatch batch;
  batch.images.reserve(static_cast<std::size_t>(spec.budget));
  batch.records.reserve(static_cast<std::size_t>(spec.budget));
  for (int n = 0; n < spec.budget; ++n) {
    Rng rng(derive_seed(spec.seed, {kPoisonStream, static_cast<std::uint64_t>(n)}));
    const TargetRef pick = targets[uniform_int(rng, 0, static_cast<long>(targets.size()) - 1)];
    const auto& task = spec.tasks[pick.task];
    const auto& refs = task.references[pick.target];
    const int ref = static_cast<int>(uniform_int(rng, 0, static_cast<long>(refs.size()) - 1));
    const int method = spec.methods[uniform_int(rng, 0, static_cast<long>(spec.methods.size()) - 1)];

    const EvasionCrop target_crop = evasion_crop(task.targets[pick.target], spec.evasion_crop_scale, rng);
    const EvasionCrop ref_crop = evasion_crop(refs[ref], spec.evasion_crop_scale, rng);

    batch.images.push_back(quantized(combine(target_crop.image, ref_crop.image, method, out_size)));
    PoisonRecord rec;
    rec.task = pick.task;
    rec.target = pick.target;
    rec.reference = ref;
    rec.method = method;
    rec.crop_scale = spec.evasion_crop_scale;
    rec.target_crop = target_crop.offsets;
    rec.reference_crop = ref_crop.offsets;
    batch.records.push_back(rec);
  }
  return batch;
}

Image interpolate(const Image& target, const Image& reference, double alpha) {
  if (!target.same_shape(reference)) throw std::invalid_argument("target and reference shapes differ");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
  Image out = reference;
  auto dst = out.pixels();
  auto t = target.pixels();
  auto r = reference.pixels();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (alpha == 0.0) dst[i] = r[i];
    else if (alpha == 1.0) dst[i] = t[i];
    else dst[i] = static_cast<float>((1.0 - alpha) * r[i] + alpha * t[i]);
  }
  return out;
}

PoisonBatch build_icp_poison(const AttackSpec& spec, int n_steps) {
  spec.validate();
  if (n_steps < 2) throw std::invalid_argument("n_steps must be >= 2");
  const auto targets = flatten_targets(spec);
  Rng rng(derive_seed(spec.seed, kIcpStream));

  PoisonBatch batch;
  while (static_cast<int>(batch.size()) < spec.budget) {
    const TargetRef pick = targets[uniform_int(rng, 0, static_cast<long>(targets.size()) - 1)];
    const auto& task = spec.tasks[pick.task];
    const auto& refs = task.references[pick.target];
    const int ref = static_cast<int>(uniform_int(rng, 0, static_cast<long>(refs.size()) - 1));
    for (int k = 0; k < n_steps && static_cast<int>(batch.size()) < spec.budget; ++k) {
      const double alpha = static_cast<double>(k) / (n_steps - 1);
      batch.images.push_back(quantized(interpolate(task.targets[pick.target], refs[ref], alpha)));
      PoisonRecord rec;
      rec.task = pick.task;
      rec.target = pick.target;
      rec.reference = ref;
      rec.method = 0;
      rec.alpha = alpha;
      batch.records.push_back(rec);
    }
  }
  return batch;
}

AlignmentViews alignment_views(const PoisonBatch& poison, const AlignmentConfig& cfg) {
  AlignmentViews views;
  for (std::size_t n = 0; n < poison.size(); ++n) {
    Rng rng(derive_seed(cfg.seed, {0x414c49474eULL, n}));
    auto [a, b] = two_views(poison.images[n], cfg.augment, rng);
    views.first.push_back(std::move(a));
    views.second.push_back(std::move(b));
  }
  return views;
}

double cosine_alignment(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("gradient lengths differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericalDomainError("alignment of a zero gradient");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

template <class T>
std::vector<double> outer_similarity_gradient(const BasicEncoderState<T>& state, const AttackSpec& spec) {
  spec.validate();
  // Batch layout: every target, then every reference set in target order.
  std::vector<Image> images;
  std::vector<std::pair<int, int>> pairs;  // (target column, reference column)
  std::vector<int> target_cols;
  for (const auto& task : spec.tasks) {
    for (const auto& target : task.targets) {
      target_cols.push_back(static_cast<int>(images.size()));
      images.push_back(target);
    }
  }
  int flat = 0;
  for (const auto& task : spec.tasks) {
    for (std::size_t i = 0; i < task.targets.size(); ++i, ++flat) {
      for (const auto& ref : task.references[i]) {
        pairs.emplace_back(target_cols[flat], static_cast<int>(images.size()));
        images.push_back(ref);
      }
    }
  }
  const ImageShape shape = common_shape(images);
  EncoderTrace<T> trace;
  const Matrix<T> features = encoder_forward<T>(state.arch, state.encoder, pack_images<T>(images),
                                                static_cast<int>(images.size()), shape.height,
                                                shape.width, &trace);
  const Eigen::MatrixXd f = features.template cast<double>();
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(f.rows(), f.cols());
  for (auto [a, b] : pairs) {
    const double na = f.col(a).norm(), nb = f.col(b).norm();
    if (!(na > 0.0) || !(nb > 0.0)) throw NumericalDomainError("zero feature vector in similarity");
    const Eigen::VectorXd ua = f.col(a) / na, ub = f.col(b) / nb;
    const double cos = ua.dot(ub);
    // d(-cos)/da and d(-cos)/db
    grad.col(a) -= (ub - cos * ua) / na;
    grad.col(b) -= (ua - cos * ub) / nb;
  }
  std::vector<T> grad_params(state.encoder.size(), T(0));
  encoder_backward<T>(state.arch, state.encoder, trace, grad.cast<T>(), grad_params);
  return to_double(grad_params);
}

template <class T>
std::vector<double> poison_contrastive_gradient(const BasicEncoderState<T>& state,
                                                const AlignmentViews& views, double tau) {
  return to_double(simclr_gradients<T>(state, views.first, views.second, tau).encoder);
}

template <class T>
double gradient_alignment_score(const BasicEncoderState<T>& state, const PoisonBatch& poison,
                                const AttackSpec& spec, const AlignmentConfig& cfg) {
  if (poison.size() == 0) throw std::invalid_argument("gradient alignment needs a nonempty poison batch");
  const auto outer = outer_similarity_gradient(state, spec);
  const auto inner = poison_contrastive_gradient(state, alignment_views(poison, cfg), cfg.temperature);
  return cosine_alignment(outer, inner);
}

std::vector<double> optimize_alignment(const EncoderState& state, PoisonBatch& poison,
                                       const AttackSpec& spec, const AlignmentConfig& cfg,
                                       const AlignmentAscentOptions& options) {
  if (poison.size() == 0) throw std::invalid_argument("gradient alignment needs a nonempty poison batch");
  const auto outer = outer_similarity_gradient(state, spec);
  auto score = [&](const std::vector<Image>& images) {
    PoisonBatch candidate;
    candidate.images = images;
    const auto inner =
        poison_contrastive_gradient(state, alignment_views(candidate, cfg), cfg.temperature);
    return cosine_alignment(outer, inner);
  };
  auto shifted = [](const std::vector<Image>& base, const std::vector<std::vector<float>>& dir, double eps) {
    std::vector<Image> out = base;
    for (std::size_t n = 0; n < out.size(); ++n) {
      auto px = out[n].pixels();
      for (std::size_t i = 0; i < px.size(); ++i) {
        px[i] = std::clamp(static_cast<float>(px[i] + eps * dir[n][i]), 0.0f, 1.0f);
      }
      out[n] = quantized(out[n]);
    }
    return out;
  };

  Rng rng(derive_seed(options.seed, 0x53505341ULL));
  double current = score(poison.images);
  std::vector<double> trace{current};
  for (int step = 0; step < options.steps; ++step) {
    std::vector<std::vector<float>> dir(poison.size());
    for (std::size_t n = 0; n < poison.size(); ++n) {
      dir[n].resize(poison.images[n].size());
      for (float& d : dir[n]) d = bernoulli(rng, 0.5) ? 1.0f : -1.0f;
    }
    const double up = score(shifted(poison.images, dir, options.probe));
    const double down = score(shifted(poison.images, dir, -options.probe));
    const double sign = up >= down ? 1.0 : -1.0;
    auto candidate = shifted(poison.images, dir, sign * options.step_size);
    const double s = score(candidate);
    if (s >= current) {
      poison.images = std::move(candidate);
      current = s;
    }
    trace.push_back(current);
  }
  return trace;
}

template std::vector<double> outer_similarity_gradient<float>(const BasicEncoderState<float>&, const AttackSpec&);
template std::vector<double> outer_similarity_gradient<double>(const BasicEncoderState<double>&, const AttackSpec&);
template std::vector<double> poison_contrastive_gradient<float>(const BasicEncoderState<float>&,
                                                                const AlignmentViews&, double);
template std::vector<double> poison_contrastive_gradient<double>(const BasicEncoderState<double>&,
                                                                 const AlignmentViews&, double);
template double gradient_alignment_score<float>(const BasicEncoderState<float>&, const PoisonBatch&,
                                                const AttackSpec&, const AlignmentConfig&);
template double gradient_alignment_score<double>(const BasicEncoderState<double>&, const PoisonBatch&,
                                                 const AttackSpec&, const AlignmentConfig&);

void to_json(Json& j, const PoisonRecord& r) {
  j = Json{{"task", r.task},
           {"target", r.target},
           {"reference", r.reference},
           {"method", r.method},
           {"crop_scale", r.crop_scale},
           {"target_crop", crop_json(r.target_crop)},
           {"reference_crop", crop_json(r.reference_crop)}};
  if (r.alpha) j["alpha"] = *r.alpha;
}

void from_json(const Json& j, PoisonRecord& r) {
  r.task = j.at("task").get<int>();
  r.target = j.at("target").get<int>();
  r.reference = j.at("reference").get<int>();
  r.method = j.at("method").get<int>();
  r.crop_scale = j.value("crop_scale", 1.0);
  if (j.contains("target_crop")) r.target_crop = crop_from_json(j.at("target_crop"));
  if (j.contains("reference_crop")) r.reference_crop = crop_from_json(j.at("reference_crop"));
  if (j.contains("alpha")) r.alpha = j.at("alpha").get<double>();
}

void write_poison_batch(const PoisonBatch& batch, const std::filesystem::path& path) {
  if (batch.images.size() != batch.records.size()) throw std::invalid_argument("poison images/records mismatch");
  UnlabeledDataset ds;
  ds.images = batch.images;
  ds.provenance.assign(batch.images.size(), Provenance::kPoison);
  write_container(ds, path);
  Json sidecar{{"records", batch.records}};
  auto side = path;
  side += ".records.json";
  detail::write_text_atomic(side, sidecar.dump(2) + "\n");
}

PoisonBatch read_poison_batch(const std::filesystem::path& path) {
  PoisonBatch batch;
  batch.images = read_unlabeled(path).images;
  auto side = path;
  side += ".records.json";
  const auto bytes = detail::read_file(side);
  try {
    const Json j = Json::parse(bytes.begin(), bytes.end());
    batch.records = j.at("records").get<std::vector<PoisonRecord>>();
  } catch (const std::exception& e) {
    throw FormatError(side.string() + ": invalid records sidecar: " + e.what(), 0);
  }
  if (batch.records.size() != batch.images.size()) {
    throw FormatError(side.string() + ": record count does not match image count", 0);
  }
  return batch;
}

}  // namespace poisonlab
