#include <doctest.h>

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "poisonlab/augment.hpp"

using namespace poisonlab;

namespace {

struct Box {
  int y, x, h, w;
};

// Redraws a crop box by hand: area fraction, log aspect, row, column.
Box oracle_box(Rng& rng, int side, Range scale, Range aspect) {
  const double area = std::uniform_real_distribution<double>(scale.lo, scale.hi)(rng) * side * side;
  const double ratio =
      std::exp(std::uniform_real_distribution<double>(std::log(aspect.lo), std::log(aspect.hi))(rng));
  Box b{};
  b.w = std::clamp(static_cast<int>(std::lround(std::sqrt(area * ratio))), 1, side);
  b.h = std::clamp(static_cast<int>(std::lround(std::sqrt(area / ratio))), 1, side);
  b.y = static_cast<int>(std::uniform_int_distribution<long>(0, side - b.h)(rng));
  b.x = static_cast<int>(std::uniform_int_distribution<long>(0, side - b.w)(rng));
  return b;
}

// The ramp is linear in both coordinates, so bilinear resampling of a crop
// reproduces the ramp at the (clamped) source coordinate.
void check_ramp_crop(const Image& out, const Box& b, int side) {
  const double n = side - 1;
  for (int oy = 0; oy < side; ++oy) {
    const double sy = b.y + std::clamp((oy + 0.5) * b.h / side - 0.5, 0.0, b.h - 1.0);
    for (int ox = 0; ox < side; ++ox) {
      const double sx = b.x + std::clamp((ox + 0.5) * b.w / side - 0.5, 0.0, b.w - 1.0);
      REQUIRE(out.at(oy, ox, 0) == doctest::Approx(sx / n).epsilon(1e-5));
      REQUIRE(out.at(oy, ox, 1) == doctest::Approx(sy / n).epsilon(1e-5));
    }
  }
}

AugmentConfig flip_only(double p) {
  AugmentConfig cfg = AugmentConfig::none();
  cfg.flip_prob = p;
  return cfg;
}

}  // namespace

TEST_CASE("random_crop identity and constant cases") {
  Rng rng(1);
  const auto img = testutil::noise(32, 32, 3, 4);
  CHECK(random_crop(img, {1.0, 1.0}, rng, {1.0, 1.0}) == img);
  const auto c = testutil::constant(32, 32, 3, 0.3f);
  for (int i = 0; i < 10; ++i) {
    const auto out = random_crop(c, {0.08, 1.0}, rng);
    for (float v : out.pixels()) CHECK(v == doctest::Approx(0.3f));
  }
}

TEST_CASE("random_crop at scale 0.25 on the coordinate ramp matches the index oracle") {
  const auto img = testutil::ramp(32);
  Rng rng(2024), oracle_rng(2024);
  const auto out = random_crop(img, {0.25, 0.25}, rng, {1.0, 1.0});
  const Box b = oracle_box(oracle_rng, 32, {0.25, 0.25}, {1.0, 1.0});
  CHECK(b.h == 16);
  CHECK(b.w == 16);
  check_ramp_crop(out, b, 32);

  Rng again(2024);
  const auto box = sample_crop_box(32, 32, {0.25, 0.25}, {1.0, 1.0}, again);
  CHECK(box.y == b.y);
  CHECK(box.x == b.x);
}

TEST_CASE("crop rejects boxes outside the image") {
  const auto img = testutil::ramp(8);
  CHECK_THROWS_AS(crop(img, CropBox{4, 4, 5, 2}), std::invalid_argument);
  CHECK_THROWS_AS(crop(img, CropBox{0, 0, 0, 2}), std::invalid_argument);
}

TEST_CASE("augment_view no-op and involution cases") {
  const auto img = testutil::noise(16, 16, 3, 8);
  Rng rng(3);
  CHECK(augment_view(img, AugmentConfig::none(), rng) == img);
  const auto flip = flip_only(1.0);
  CHECK(augment_view(augment_view(img, flip, rng), flip, rng) == img);
  CHECK(hflip(img).at(2, 0, 1) == img.at(2, 15, 1));
}

TEST_CASE("grayscale replicates luma") {
  const auto g = to_grayscale(testutil::noise(8, 8, 3, 9));
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      CHECK(g.at(y, x, 0) == g.at(y, x, 1));
      CHECK(g.at(y, x, 1) == g.at(y, x, 2));
    }
  }
}

TEST_CASE("two_views") {
  const auto img = testutil::ramp(32);
  SUBCASE("no-op config returns the input twice") {
    Rng rng(1);
    const auto [a, b] = two_views(img, AugmentConfig::none(), rng);
    CHECK(a == img);
    CHECK(b == img);
    AugmentConfig full_crop = AugmentConfig::none();
    full_crop.enable_crop = true;
    full_crop.crop_scale = {1.0, 1.0};
    full_crop.crop_aspect = {1.0, 1.0};
    const auto [c, d] = two_views(img, full_crop, rng);
    CHECK(c == img);
    CHECK(d == img);
  }
  SUBCASE("fixed seed reproduces the pair") {
    Rng r1(77), r2(77);
    const AugmentConfig cfg;
    CHECK(two_views(img, cfg, r1) == two_views(img, cfg, r2));
  }
  SUBCASE("default crop range matches the index oracle") {
    AugmentConfig cfg = AugmentConfig::none();
    cfg.enable_crop = true;
    Rng rng(5150), oracle_rng(5150);
    const auto [a, b] = two_views(img, cfg, rng);
    const Box ba = oracle_box(oracle_rng, 32, cfg.crop_scale, cfg.crop_aspect);
    const Box bb = oracle_box(oracle_rng, 32, cfg.crop_scale, cfg.crop_aspect);
    check_ramp_crop(a, ba, 32);
    check_ramp_crop(b, bb, 32);
  }
}

TEST_CASE("augmented outputs keep shape and range") {
  const auto img = testutil::noise(32, 32, 3, 12);
  Rng rng(6);
  const AugmentConfig cfg;
  for (int i = 0; i < 50; ++i) {
    const auto out = augment_view(img, cfg, rng);
    REQUIRE(out.same_shape(img));
    for (float v : out.pixels()) REQUIRE((v >= 0.0f && v <= 1.0f));
  }
}

TEST_CASE("flip frequency") {
  Image img(1, 2, 1);
  img.at(0, 1, 0) = 1.0f;
  Rng rng(99);
  const auto cfg = flip_only(0.5);
  int flips = 0;
  for (int i = 0; i < 10000; ++i) flips += augment_view(img, cfg, rng).at(0, 0, 0) > 0.5f ? 1 : 0;
  const double f = flips / 10000.0;
  CHECK(f >= 0.47);
  CHECK(f <= 0.53);
}

TEST_CASE("AugmentConfig json and validation") {
  AugmentConfig cfg;
  cfg.flip_prob = 0.25;
  cfg.crop_scale = {0.2, 0.9};
  nlohmann::json j = cfg;
  CHECK(j.get<AugmentConfig>() == cfg);
  AugmentConfig bad;
  bad.crop_scale = {0.5, 0.2};
  CHECK_THROWS(bad.validate());
  bad = AugmentConfig{};
  bad.flip_prob = 1.5;
  CHECK_THROWS(bad.validate());
}
