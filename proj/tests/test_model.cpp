#include <doctest.h>

#include <algorithm>
#include <vector>

#include "helpers.hpp"
#include "poisonlab/errors.hpp"
#include "poisonlab/model.hpp"

using namespace poisonlab;

namespace {

Arch small_arch() {
  Arch a;
  a.widths = {8, 16};
  a.strides = {2, 2};
  a.norm_groups = 4;
  a.feature_dim = 12;
  a.head_hidden = 10;
  a.proj_dim = 6;
  return a;
}

std::vector<Image> batch(int n, std::uint64_t seed) {
  std::vector<Image> out;
  for (int i = 0; i < n; ++i) out.push_back(testutil::noise(16, 16, 3, seed + static_cast<std::uint64_t>(i)));
  return out;
}

}  // namespace

TEST_CASE("init is seeded") {
  const auto a = init(small_arch(), 3);
  const auto b = init(small_arch(), 3);
  const auto c = init(small_arch(), 4);
  CHECK(a.encoder == b.encoder);
  CHECK(a.head == b.head);
  CHECK(a.encoder != c.encoder);
  CHECK(a.encoder.size() == encoder_layout(small_arch()).total);
  CHECK(a.head.size() == head_layout(small_arch()).total);
}

TEST_CASE("default arch feature shape") {
  const auto state = init(Arch{}, 0);
  const auto f = forward_features(state, batch(4, 1));
  CHECK(f.rows() == 4);
  CHECK(f.cols() == Arch{}.feature_dim);
}

TEST_CASE("arch validation") {
  Arch a = small_arch();
  a.norm_groups = 3;  // does not divide 8
  CHECK_THROWS(a.validate());
  a = small_arch();
  a.strides = {2};
  CHECK_THROWS(a.validate());
}

TEST_CASE("forward passes are batch independent and pure") {
  const auto state = init(small_arch(), 5);
  const auto imgs = batch(2, 10);
  const auto both = forward_features(state, imgs);
  const auto one = forward_features(state, std::span<const Image>(imgs.data() + 1, 1));
  CHECK((one.row(0) - both.row(1)).cwiseAbs().maxCoeff() == 0.0f);
  CHECK(forward_features(state, imgs) == both);

  const std::vector<Image> same{imgs[0], imgs[0]};
  const auto dup = forward_features(state, same);
  CHECK(dup.row(0) == dup.row(1));

  const auto proj_both = forward_projection(state, imgs);
  const auto proj_one = forward_projection(state, std::span<const Image>(imgs.data() + 1, 1));
  CHECK(proj_one.row(0) == proj_both.row(1));
  CHECK(proj_both.cols() == small_arch().proj_dim);
}

TEST_CASE("zero network gives zero features and projections") {
  auto state = init(small_arch(), 1);
  std::fill(state.encoder.begin(), state.encoder.end(), 0.0f);
  std::fill(state.head.begin(), state.head.end(), 0.0f);
  const auto imgs = batch(3, 2);
  CHECK(forward_features(state, imgs).cwiseAbs().maxCoeff() == 0.0f);
  CHECK(forward_projection(state, imgs).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("momentum update") {
  auto state = init(small_arch(), 7);
  attach_momentum(state, 16);
  REQUIRE(state.momentum_encoder);
  CHECK(*state.momentum_encoder == state.encoder);

  std::fill(state.momentum_encoder->begin(), state.momentum_encoder->end(), 1.0f);
  std::fill(state.momentum_head->begin(), state.momentum_head->end(), 1.0f);
  std::fill(state.encoder.begin(), state.encoder.end(), 0.0f);

  SUBCASE("m = 1 keeps the momentum copy") {
    momentum_update(state, 1.0);
    CHECK(std::all_of(state.momentum_encoder->begin(), state.momentum_encoder->end(),
                      [](float v) { return v == 1.0f; }));
  }
  SUBCASE("m = 0.99") {
    momentum_update(state, 0.99);
    CHECK((*state.momentum_encoder)[0] == doctest::Approx(0.99));
  }
  SUBCASE("m = 0 copies the query networks") {
    auto fresh = init(small_arch(), 8);
    attach_momentum(fresh, 4);
    fresh.momentum_encoder = init(small_arch(), 9).encoder;
    fresh.momentum_head = init(small_arch(), 9).head;
    momentum_update(fresh, 0.0);
    CHECK(*fresh.momentum_encoder == fresh.encoder);
    CHECK(*fresh.momentum_head == fresh.head);
    const auto imgs = batch(2, 3);
    CHECK(forward_momentum_projection(fresh, imgs) == forward_projection(fresh, imgs));
  }
}

TEST_CASE("key queue is FIFO and bounded") {
  KeyQueue<double> q(2, 3);
  Matrix<double> keys(3, 3);
  keys << 1, 1, 1, 2, 2, 2, 3, 3, 3;
  q.enqueue(keys.topRows(1));
  CHECK(q.size() == 1);
  q.enqueue(keys.bottomRows(2));
  CHECK(q.size() == 2);
  const auto m = q.as_matrix();
  CHECK(m(0, 0) == 2.0);
  CHECK(m(1, 0) == 3.0);

  KeyQueue<double> big(5, 3);
  big.enqueue(keys);
  CHECK(big.size() == 3);

  Rng rng(4);
  KeyQueue<double> r(7, 2);
  for (int i = 0; i < 50; ++i) {
    const int n = static_cast<int>(uniform_int(rng, 0, 5));
    r.enqueue(Matrix<double>::Constant(n, 2, i));
    REQUIRE(r.size() <= 7);
  }
  CHECK_THROWS(r.enqueue(Matrix<double>::Zero(1, 3)));
}

TEST_CASE("enqueue_keys feeds the state dictionary") {
  auto state = init(small_arch(), 1);
  attach_momentum(state, 3);
  enqueue_keys(state, Matrix<float>(Matrix<float>::Ones(2, small_arch().proj_dim)));
  CHECK(state.dictionary.size() == 2);
  enqueue_keys(state, Matrix<float>(Matrix<float>::Zero(2, small_arch().proj_dim)));
  CHECK(state.dictionary.size() == 3);
}

TEST_CASE("checkpoint round trip and corruption") {
  auto state = init(small_arch(), 11);
  attach_momentum(state, 8);
  enqueue_keys(state, Matrix<float>(Matrix<float>::Constant(3, small_arch().proj_dim, 0.25f)));
  state.history.push_back("pretrain simclr epochs=1");
  const auto dir = testutil::scratch("checkpoint");

  save_checkpoint(state, dir / "s.penw");
  const auto back = load_checkpoint(dir / "s.penw");
  CHECK(back.arch == state.arch);
  CHECK(back.encoder == state.encoder);
  CHECK(back.head == state.head);
  CHECK(back.momentum_encoder == state.momentum_encoder);
  CHECK(back.dictionary.size() == 3);
  CHECK(back.history == state.history);
  CHECK(encode_checkpoint(back) == encode_checkpoint(state));

  const auto plain = init(small_arch(), 12);
  const auto plain_back = decode_checkpoint(encode_checkpoint(plain));
  CHECK_FALSE(plain_back.momentum_encoder.has_value());
  CHECK(plain_back.encoder == plain.encoder);

  auto bytes = encode_checkpoint(state);
  SUBCASE("magic") {
    bytes[1] = 'x';
    CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
  }
  SUBCASE("truncated") {
    bytes.resize(bytes.size() - 7);
    CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
  }
  SUBCASE("length field") {
    bytes[8] = 0xff;
    bytes[9] = 0xff;
    bytes[10] = 0xff;
    CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
  }
}

TEST_CASE("float and double networks agree") {
  const auto state = init(small_arch(), 2);
  const auto d = state.cast<double>();
  const auto imgs = batch(2, 5);
  const Eigen::MatrixXd f32 = forward_projection(state, imgs).cast<double>();
  const Eigen::MatrixXd f64 = forward_projection(d, imgs);
  CHECK((f32 - f64).cwiseAbs().maxCoeff() < 1e-4);
}
