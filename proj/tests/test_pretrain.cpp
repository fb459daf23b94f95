#include <doctest.h>

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "poisonlab/data.hpp"
#include "poisonlab/pretrain.hpp"

using namespace poisonlab;

namespace {

Arch tiny_arch() {
  Arch a;
  a.widths = {4, 6};
  a.strides = {2, 1};
  a.norm_groups = 2;
  a.feature_dim = 5;
  a.head_hidden = 6;
  a.proj_dim = 4;
  return a;
}

Arch small_arch() {
  Arch a;
  a.widths = {8, 16};
  a.strides = {2, 2};
  a.norm_groups = 4;
  a.feature_dim = 32;
  a.head_hidden = 32;
  a.proj_dim = 16;
  return a;
}

PretrainConfig small_config(int epochs) {
  PretrainConfig cfg;
  cfg.arch = small_arch();
  cfg.epochs = epochs;
  cfg.batch_size = 64;
  cfg.seed = 21;
  return cfg;
}

UnlabeledDataset synthetic(int per_class, int size, std::uint64_t seed) {
  return as_unlabeled(generate_synthetic(per_class, 4, size, seed));
}

}  // namespace

TEST_CASE("zero epochs returns the initialization") {
  const auto ds = synthetic(20, 16, 1);
  const auto cfg = small_config(0);
  const auto r = pretrain(ds, cfg);
  const auto fresh = init(cfg.arch, cfg.seed);
  CHECK(r.state.encoder == fresh.encoder);
  CHECK(r.state.head == fresh.head);
  CHECK(r.epochs.empty());
  CHECK(finetune(fresh, ds, cfg).state.encoder == fresh.encoder);
}

TEST_CASE("one epoch is reproducible") {
  const auto ds = synthetic(20, 16, 2);
  const auto cfg = small_config(1);
  const auto a = pretrain(ds, cfg);
  const auto b = pretrain(ds, cfg);
  CHECK(encode_checkpoint(a.state) == encode_checkpoint(b.state));
  CHECK(a.epochs.at(0).loss == b.epochs.at(0).loss);
  CHECK_FALSE(a.state.encoder == init(cfg.arch, cfg.seed).encoder);
}

TEST_CASE("config validation") {
  PretrainConfig cfg = small_config(1);
  cfg.batch_size = 1;
  CHECK_THROWS(cfg.validate());
  cfg = small_config(1);
  cfg.temperature = 0;
  CHECK_THROWS(cfg.validate());
  cfg = small_config(-1);
  CHECK_THROWS(cfg.validate());
  cfg = small_config(1);
  cfg.algorithm = Algorithm::kMoco;
  cfg.dictionary_capacity = 0;
  CHECK_THROWS(cfg.validate());
  CHECK_THROWS(pretrain(synthetic(2, 16, 1), small_config(1)));  // 8 images < batch 64
}

TEST_CASE("config json round trip") {
  PretrainConfig cfg = small_config(7);
  cfg.algorithm = Algorithm::kMoco;
  cfg.temperature = 0.2;
  nlohmann::json j = cfg;
  const auto back = j.get<PretrainConfig>();
  CHECK(back.algorithm == Algorithm::kMoco);
  CHECK(back.epochs == 7);
  CHECK(back.arch == cfg.arch);
  CHECK(back.augment == cfg.augment);
  CHECK(algorithm_from_string("moco") == Algorithm::kMoco);
  CHECK_THROWS(algorithm_from_string("byol"));
}

TEST_CASE("simclr parameter gradients match central differences") {
  auto state = init(tiny_arch(), 4).cast<double>();
  std::vector<Image> first, second;
  for (int i = 0; i < 3; ++i) {
    first.push_back(testutil::noise(6, 6, 3, 10 + static_cast<std::uint64_t>(i)));
    second.push_back(testutil::noise(6, 6, 3, 20 + static_cast<std::uint64_t>(i)));
  }
  const auto g = simclr_gradients<double>(state, first, second, 0.5);
  const double h = 1e-6;
  auto loss_at = [&](std::vector<double>& params, std::size_t k, double delta) {
    const double saved = params[k];
    params[k] = saved + delta;
    const double v = simclr_gradients<double>(state, first, second, 0.5).loss;
    params[k] = saved;
    return v;
  };
  double max_err = 0.0, max_grad = 0.0;
  for (std::size_t k = 0; k < state.encoder.size(); ++k) {
    const double num = (loss_at(state.encoder, k, h) - loss_at(state.encoder, k, -h)) / (2 * h);
    max_err = std::max(max_err, std::abs(num - g.encoder[k]));
    max_grad = std::max(max_grad, std::abs(num));
  }
  for (std::size_t k = 0; k < state.head.size(); ++k) {
    const double num = (loss_at(state.head, k, h) - loss_at(state.head, k, -h)) / (2 * h);
    max_err = std::max(max_err, std::abs(num - g.head[k]));
    max_grad = std::max(max_grad, std::abs(num));
  }
  CHECK(max_grad > 0.0);
  CHECK(max_err / max_grad < 1e-4);
}

TEST_CASE("view streams are per sample") {
  CHECK(view_seed(1, 1, 0) != view_seed(1, 1, 1));
  CHECK(view_seed(1, 1, 0) != view_seed(1, 2, 0));
  CHECK(view_seed(1, 1, 0) == view_seed(1, 1, 0));
}

TEST_CASE("early stop callback and training log") {
  const auto ds = synthetic(20, 16, 3);
  const auto dir = testutil::scratch("pretrain_log");
  PretrainCallbacks cb;
  cb.log_path = dir / "loss.jsonl";
  cb.on_epoch = [](const EpochStats& s) { return s.epoch < 2; };
  const auto r = pretrain(ds, small_config(5), cb);
  CHECK(r.epochs.size() == 2);
  std::ifstream in(dir / "loss.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("epoch").get<int>() == lines + 1);
    CHECK(j.contains("loss"));
    CHECK(j.contains("seconds"));
    ++lines;
  }
  CHECK(lines == 2);
}

TEST_CASE("moco training fills the dictionary") {
  const auto ds = synthetic(20, 16, 4);
  PretrainConfig cfg = small_config(2);
  cfg.algorithm = Algorithm::kMoco;
  cfg.temperature = 0.2;
  cfg.batch_size = 16;
  cfg.dictionary_capacity = 40;
  const auto r = pretrain(ds, cfg);
  REQUIRE(r.state.momentum_encoder);
  CHECK(r.state.dictionary.size() == 40);
  CHECK(*r.state.momentum_encoder != r.state.encoder);
  CHECK(std::isfinite(r.epochs.back().loss));
  const auto again = pretrain(ds, cfg);
  CHECK(encode_checkpoint(again.state) == encode_checkpoint(r.state));
}

TEST_CASE("thirty epochs on 2000 images lower the loss") {
  const auto ds = synthetic(500, 32, 5);
  const auto r = pretrain(ds, small_config(30));
  REQUIRE(r.epochs.size() == 30);
  for (int e = 1; e < 5; ++e) CHECK(r.epochs[static_cast<std::size_t>(e)].loss < r.epochs[static_cast<std::size_t>(e - 1)].loss);
  CHECK(r.epochs.back().loss < r.epochs.front().loss);
}
