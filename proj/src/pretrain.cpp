#include "poisonlab/pretrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "poisonlab/losses.hpp"
#include "poisonlab/rng.hpp"

namespace poisonlab {
namespace {

using Json = nlohmann::json;

struct BatchLoss {
  double sum = 0.0;
  std::size_t terms = 0;
};

BatchLoss moco_step(EncoderState& state, const std::vector<Image>& queries_in,
                    const std::vector<Image>& keys_in, const PretrainConfig& cfg, Adam& enc_opt,
                    Adam& head_opt) {
  const Matrix<float> keys = forward_momentum_projection<float>(state, keys_in);

  const ImageShape shape = common_shape(queries_in);
  const int batch = static_cast<int>(queries_in.size());
  EncoderTrace<float> enc_trace;
  HeadTrace<float> head_trace;
  const Matrix<float> features = encoder_forward<float>(
      state.arch, state.encoder, pack_images<float>(queries_in), batch, shape.height, shape.width,
      &enc_trace);
  const Matrix<float> proj = head_forward<float>(state.arch, state.head, features, &head_trace);

  const LossResult loss =
      moco_batch_loss(proj.transpose().cast<double>(), keys.cast<double>(),
                      state.dictionary.as_matrix().cast<double>(), cfg.temperature);

  std::vector<float> grad_enc(state.encoder.size(), 0.0f), grad_head(state.head.size(), 0.0f);
  const Matrix<float> grad_proj = loss.grad.transpose().cast<float>();
  const Matrix<float> grad_feat =
      head_backward<float>(state.arch, state.head, head_trace, grad_proj, grad_head);
  encoder_backward<float>(state.arch, state.encoder, enc_trace, grad_feat, grad_enc);
  enc_opt.step(state.encoder, grad_enc);
  head_opt.step(state.head, grad_head);

  momentum_update(state, cfg.moco_momentum);
  enqueue_keys(state, keys);
  return {loss.value, static_cast<std::size_t>(batch)};
}

PretrainResult run_loop(EncoderState state, const UnlabeledDataset& ds, const PretrainConfig& cfg,
                        const PretrainCallbacks& callbacks, const std::string& tag) {
  cfg.validate();
  ds.validate();
  if (ds.size() < static_cast<std::size_t>(cfg.batch_size)) {
    throw std::invalid_argument("dataset has " + std::to_string(ds.size()) +
                                " images, fewer than the batch size " + std::to_string(cfg.batch_size));
  }
  if (!(state.arch == cfg.arch)) throw std::invalid_argument("encoder architecture does not match config");

  PretrainResult result;
  if (cfg.epochs == 0) {
    result.state = std::move(state);
    return result;
  }
  const bool moco = cfg.algorithm == Algorithm::kMoco;
  if (moco && (!state.momentum_encoder || !state.momentum_head)) {
    attach_momentum(state, static_cast<std::size_t>(cfg.dictionary_capacity));
  }

  Adam enc_opt(state.encoder.size(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
  Adam head_opt(state.head.size(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
  std::ofstream log;
  if (callbacks.log_path) {
    if (callbacks.log_path->has_parent_path()) std::filesystem::create_directories(callbacks.log_path->parent_path());
    log.open(*callbacks.log_path, std::ios::app);
  }

  const std::size_t min_batch = moco ? 1 : 2;
  std::vector<std::size_t> order(ds.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, {0x5348554646ULL, static_cast<std::uint64_t>(epoch)}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    BatchLoss total;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t n = std::min<std::size_t>(cfg.batch_size, order.size() - start);
      if (n < min_batch) break;
      std::vector<Image> first, second;
      first.reserve(n);
      second.reserve(n);
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t idx = order[start + b];
        Rng rng(view_seed(cfg.seed, epoch, idx));
        auto [v1, v2] = two_views(ds.images[idx], cfg.augment, rng);
        first.push_back(std::move(v1));
        second.push_back(std::move(v2));
      }
      if (moco) {
        const BatchLoss bl = moco_step(state, first, second, cfg, enc_opt, head_opt);
        total.sum += bl.sum;
        total.terms += bl.terms;
      } else {
        const auto grads = simclr_gradients<float>(state, first, second, cfg.temperature);
        enc_opt.step(state.encoder, grads.encoder);
        head_opt.step(state.head, grads.head);
        total.sum += grads.loss;
        total.terms += 2 * n;
      }
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.loss = total.terms > 0 ? total.sum / static_cast<double>(total.terms) : 0.0;
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.epochs.push_back(stats);
    if (log.is_open()) {
      log << Json{{"epoch", stats.epoch}, {"loss", stats.loss}, {"seconds", stats.seconds}}.dump() << "\n";
      log.flush();
    }
    if (callbacks.on_epoch && !callbacks.on_epoch(stats)) break;
  }
  state.history.push_back(tag + ":" + to_string(cfg.algorithm) + ":epochs=" +
                          std::to_string(result.epochs.size()));
  result.state = std::move(state);
  return result;
}

}  // namespace

const char* to_string(Algorithm a) { return a == Algorithm::kMoco ? "moco" : "simclr"; }

Algorithm algorithm_from_string(const std::string& s) {
  if (s == "simclr") return Algorithm::kSimclr;
  if (s == "moco") return Algorithm::kMoco;
  throw std::invalid_argument("unknown algorithm '" + s + "'");
}

void PretrainConfig::validate() const {
  if (!(temperature > 0.0)) throw std::invalid_argument("pretrain.temperature must be > 0");
  if (algorithm == Algorithm::kSimclr && batch_size < 2) {
    throw std::invalid_argument("pretrain.batch_size must be >= 2 for simclr");
  }
  if (batch_size < 1) throw std::invalid_argument("pretrain.batch_size must be >= 1");
  if (epochs < 0) throw std::invalid_argument("pretrain.epochs must be >= 0");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("pretrain.learning_rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_eps > 0.0)) {
    throw std::invalid_argument("pretrain Adam constants out of range");
  }
  if (!(moco_momentum >= 0.0 && moco_momentum <= 1.0)) {
    throw std::invalid_argument("pretrain.moco_momentum must lie in [0, 1]");
  }
  if (algorithm == Algorithm::kMoco && dictionary_capacity < 1) {
    throw std::invalid_argument("pretrain.dictionary_capacity must be >= 1 for moco");
  }
  augment.validate();
  arch.validate();
}

void to_json(Json& j, const PretrainConfig& cfg) {
  j = Json{{"algorithm", to_string(cfg.algorithm)},
           {"temperature", cfg.temperature},
           {"batch_size", cfg.batch_size},
           {"epochs", cfg.epochs},
           {"learning_rate", cfg.learning_rate},
           {"beta1", cfg.beta1},
           {"beta2", cfg.beta2},
           {"adam_eps", cfg.adam_eps},
           {"moco_momentum", cfg.moco_momentum},
           {"dictionary_capacity", cfg.dictionary_capacity},
           {"augment", cfg.augment},
           {"arch", cfg.arch},
           {"seed", cfg.seed}};
}

void from_json(const Json& j, PretrainConfig& cfg) {
  if (j.contains("algorithm")) {
    cfg.algorithm = algorithm_from_string(j.at("algorithm").get<std::string>());
    if (!j.contains("temperature")) cfg.temperature = cfg.algorithm == Algorithm::kMoco ? 0.2 : 0.5;
  }
  cfg.temperature = j.value("temperature", cfg.temperature);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
  cfg.beta1 = j.value("beta1", cfg.beta1);
  cfg.beta2 = j.value("beta2", cfg.beta2);
  cfg.adam_eps = j.value("adam_eps", cfg.adam_eps);
  cfg.moco_momentum = j.value("moco_momentum", cfg.moco_momentum);
  cfg.dictionary_capacity = j.value("dictionary_capacity", cfg.dictionary_capacity);
  if (j.contains("augment")) cfg.augment = j.at("augment").get<AugmentConfig>();
  if (j.contains("arch")) cfg.arch = j.at("arch").get<Arch>();
  cfg.seed = j.value("seed", cfg.seed);
}

Adam::Adam(std::size_t size, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(size, 0.0), v_(size, 0.0) {}

void Adam::step(std::span<float> params, std::span<const float> grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw std::invalid_argument("Adam: parameter/gradient size mismatch");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
    params[i] -= static_cast<float>(lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_));
  }
}

std::uint64_t view_seed(std::uint64_t seed, int epoch, std::size_t index) {
  return derive_seed(seed, {0x56494557ULL, static_cast<std::uint64_t>(epoch), index});
}

template <class T>
BasicContrastiveGradients<T> simclr_gradients(const BasicEncoderState<T>& state,
                                              std::span<const Image> first,
                                              std::span<const Image> second, double tau) {
  if (first.size() != second.size() || first.empty()) {
    throw std::invalid_argument("simclr_gradients: view lists must be nonempty and equal length");
  }
  std::vector<Image> views(first.begin(), first.end());
  views.insert(views.end(), second.begin(), second.end());
  const ImageShape shape = common_shape(views);
  const int batch = static_cast<int>(views.size());

  EncoderTrace<T> enc_trace;
  HeadTrace<T> head_trace;
  const Matrix<T> features = encoder_forward<T>(state.arch, state.encoder, pack_images<T>(views), batch,
                                                shape.height, shape.width, &enc_trace);
  const Matrix<T> proj = head_forward<T>(state.arch, state.head, features, &head_trace);
  const auto pairing = simclr_pairing(static_cast<int>(first.size()));
  const LossResult loss = simclr_loss(proj.transpose().template cast<double>(), pairing, tau);

  BasicContrastiveGradients<T> out;
  out.loss = loss.value;
  out.encoder.assign(state.encoder.size(), T(0));
  out.head.assign(state.head.size(), T(0));
  const Matrix<T> grad_proj = loss.grad.transpose().template cast<T>();
  const Matrix<T> grad_feat = head_backward<T>(state.arch, state.head, head_trace, grad_proj, out.head);
  encoder_backward<T>(state.arch, state.encoder, enc_trace, grad_feat, out.encoder);
  return out;
}

template BasicContrastiveGradients<float> simclr_gradients<float>(const BasicEncoderState<float>&,
                                                                  std::span<const Image>,
                                                                  std::span<const Image>, double);
template BasicContrastiveGradients<double> simclr_gradients<double>(const BasicEncoderState<double>&,
                                                                    std::span<const Image>,
                                                                    std::span<const Image>, double);

PretrainResult pretrain(const UnlabeledDataset& ds, const PretrainConfig& cfg,
                        const PretrainCallbacks& callbacks) {
  cfg.validate();
  return run_loop(init(cfg.arch, cfg.seed), ds, cfg, callbacks, "pretrained");
}

PretrainResult finetune(const EncoderState& state, const UnlabeledDataset& ds,
                        const PretrainConfig& cfg, const PretrainCallbacks& callbacks) {
  return run_loop(state, ds, cfg, callbacks, "finetuned");
}

}  // namespace poisonlab
