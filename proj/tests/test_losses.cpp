#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "poisonlab/errors.hpp"
#include "poisonlab/losses.hpp"
#include "poisonlab/rng.hpp"

using namespace poisonlab;

namespace {

Eigen::MatrixXd gaussian(int rows, int cols, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = n(rng);
  }
  return m;
}

double cos_sim(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  double dot = 0, na = 0, nb = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::sqrt(na * nb);
}

// Term-by-term NT-Xent sum.
double simclr_oracle(const Eigen::MatrixXd& u, const std::vector<int>& pair, double tau) {
  double total = 0;
  for (int i = 0; i < u.rows(); ++i) {
    double denom = 0;
    for (int k = 0; k < u.rows(); ++k) {
      if (k != i) denom += std::exp(cos_sim(u.row(i), u.row(k)) / tau);
    }
    total += -std::log(std::exp(cos_sim(u.row(i), u.row(pair[static_cast<std::size_t>(i)])) / tau) / denom);
  }
  return total;
}

double moco_oracle(const Eigen::VectorXd& q, const Eigen::VectorXd& kp, const Eigen::MatrixXd& d, double tau) {
  const double pos = std::exp(cos_sim(q, kp) / tau);
  double denom = pos;
  for (int r = 0; r < d.rows(); ++r) denom += std::exp(cos_sim(q, d.row(r)) / tau);
  return -std::log(pos / denom);
}

double max_rel_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric) {
  const double scale = std::max(numeric.cwiseAbs().maxCoeff(), 1e-8);
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

}  // namespace

TEST_CASE("simclr pairing") {
  CHECK(simclr_pairing(2) == std::vector<int>{2, 3, 0, 1});
}

TEST_CASE("simclr closed forms") {
  Rng rng(1);
  const auto one = gaussian(2, 5, rng);
  CHECK(std::abs(simclr_loss(one, simclr_pairing(1), 0.5).value) < 1e-6);

  const Eigen::MatrixXd same = Eigen::MatrixXd::Ones(4, 3);
  const double v = simclr_loss(same, simclr_pairing(2), 0.5).value;
  CHECK(v / 4 == doctest::Approx(std::log(3.0)).epsilon(1e-5));
  CHECK(v > 0);
}

TEST_CASE("simclr matches the scalar oracle") {
  Rng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    Eigen::MatrixXd u = gaussian(4, 6, rng);
    u.rowwise().normalize();
    const auto pair = simclr_pairing(2);
    CHECK(std::abs(simclr_loss(u, pair, 0.5).value - simclr_oracle(u, pair, 0.5)) < 1e-10);
  }
  const auto u = gaussian(6, 4, rng);
  const std::vector<int> custom{5, 3, 4, 1, 2, 0};
  CHECK(std::abs(simclr_loss(u, custom, 0.3).value - simclr_oracle(u, custom, 0.3)) < 1e-10);
}

TEST_CASE("simclr rejects malformed pairings") {
  Rng rng(3);
  const auto u = gaussian(4, 3, rng);
  const std::vector<int> bad{1, 0, 3, 3};
  CHECK_THROWS(simclr_loss(u, bad, 0.5));
  CHECK_THROWS(simclr_loss(u, simclr_pairing(2), 0.0));
  Eigen::MatrixXd z = u;
  z.row(2).setZero();
  CHECK_THROWS_AS(simclr_loss(z, simclr_pairing(2), 0.5), NumericalDomainError);
}

TEST_CASE("moco closed forms") {
  Rng rng(4);
  const Eigen::VectorXd q = gaussian(5, 1, rng);
  const Eigen::VectorXd k = gaussian(5, 1, rng);
  CHECK(std::abs(moco_loss(q, k, Eigen::MatrixXd(0, 5), 0.2).value) < 1e-6);

  const Eigen::VectorXd qn = q.normalized();
  Eigen::MatrixXd d(1, 5);
  d.row(0) = -qn.transpose();
  CHECK(moco_loss(q, qn, d, 1.0).value == doctest::Approx(std::log1p(std::exp(-2.0))).epsilon(1e-5));
}

TEST_CASE("moco matches the scalar oracle") {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::VectorXd q = gaussian(7, 1, rng);
    const Eigen::VectorXd k = gaussian(7, 1, rng);
    const auto d = gaussian(8, 7, rng);
    CHECK(std::abs(moco_loss(q, k, d, 0.2).value - moco_oracle(q, k, d, 0.2)) < 1e-10);
  }
}

TEST_CASE("simclr gradient matches central differences") {
  Rng rng(6);
  const double h = 1e-4;
  for (int trial = 0; trial < 20; ++trial) {
    const auto u = gaussian(8, 16, rng);
    const auto pair = simclr_pairing(4);
    const auto res = simclr_loss(u, pair, 0.5);
    Eigen::MatrixXd numeric(u.rows(), u.cols());
    for (int i = 0; i < u.rows(); ++i) {
      for (int j = 0; j < u.cols(); ++j) {
        Eigen::MatrixXd up = u, dn = u;
        up(i, j) += h;
        dn(i, j) -= h;
        numeric(i, j) = (simclr_loss(up, pair, 0.5).value - simclr_loss(dn, pair, 0.5).value) / (2 * h);
      }
    }
    REQUIRE(max_rel_error(res.grad, numeric) < 1e-4);
  }
}

TEST_CASE("moco gradients match central differences") {
  Rng rng(7);
  const double h = 1e-4;
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::VectorXd q = gaussian(16, 1, rng);
    const Eigen::VectorXd k = gaussian(16, 1, rng);
    const auto d = gaussian(8, 16, rng);
    const auto res = moco_loss(q, k, d, 0.2);
    Eigen::VectorXd numeric(16);
    for (int j = 0; j < 16; ++j) {
      Eigen::VectorXd up = q, dn = q;
      up[j] += h;
      dn[j] -= h;
      numeric[j] = (moco_loss(up, k, d, 0.2).value - moco_loss(dn, k, d, 0.2).value) / (2 * h);
    }
    REQUIRE(max_rel_error(res.grad, numeric) < 1e-4);
  }
  const auto qs = gaussian(3, 6, rng);
  const auto ks = gaussian(3, 6, rng);
  const auto d = gaussian(5, 6, rng);
  const auto batch = moco_batch_loss(qs, ks, d, 0.2);
  double sum = 0;
  for (int r = 0; r < 3; ++r) {
    const auto single = moco_loss(qs.row(r).transpose(), ks.row(r).transpose(), d, 0.2);
    sum += single.value;
    CHECK((batch.grad.row(r).transpose() - single.grad).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK(batch.value == doctest::Approx(sum).epsilon(1e-12));
}

TEST_CASE("simclr permutation and scale invariance") {
  Rng rng(8);
  const auto u = gaussian(8, 5, rng);
  const auto pair = simclr_pairing(4);
  const double base = simclr_loss(u, pair, 0.5).value;

  std::vector<int> perm(8);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Eigen::MatrixXd permuted(8, 5);
  std::vector<int> new_pair(8);
  std::vector<int> where(8);
  for (int i = 0; i < 8; ++i) where[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i;
  for (int i = 0; i < 8; ++i) {
    permuted.row(i) = u.row(perm[static_cast<std::size_t>(i)]);
    new_pair[static_cast<std::size_t>(i)] =
        where[static_cast<std::size_t>(pair[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])])];
  }
  CHECK(std::abs(simclr_loss(permuted, new_pair, 0.5).value - base) < 1e-9);

  Eigen::MatrixXd scaled = u;
  scaled.row(3) *= 17.5;
  scaled.row(6) *= 0.01;
  CHECK(std::abs(simclr_loss(scaled, pair, 0.5).value - base) < 1e-9);
}

TEST_CASE("cosine similarity domain") {
  CHECK_THROWS_AS(cosine_similarity(Eigen::VectorXd::Zero(3), Eigen::VectorXd::Ones(3)), NumericalDomainError);
  CHECK(cosine_similarity(Eigen::VectorXd::Ones(3), 2 * Eigen::VectorXd::Ones(3)) == doctest::Approx(1.0));
}
