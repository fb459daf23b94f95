#include "poisonlab/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "poisonlab/errors.hpp"

namespace poisonlab {
namespace {

// Row norms; zero rows are outside the domain of cosine similarity.
Eigen::VectorXd row_norms(const Eigen::MatrixXd& m, const char* what) {
  Eigen::VectorXd norms = m.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i) {
    if (!(norms(i) > 0.0) || !std::isfinite(norms(i))) {
      throw NumericalDomainError(std::string(what) + " row " + std::to_string(i) +
                                 " has zero or non-finite norm");
    }
  }
  return norms;
}

// Gradient through u -> u / |u| for each row.
Eigen::MatrixXd normalize_backward(const Eigen::MatrixXd& z, const Eigen::VectorXd& norms,
                                   const Eigen::MatrixXd& grad_z) {
  const Eigen::VectorXd radial = (z.array() * grad_z.array()).rowwise().sum();
  Eigen::MatrixXd out = grad_z - (z.array().colwise() * radial.array()).matrix();
  return out.array().colwise() / norms.array();
}

void check_tau(double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature must be > 0");
}

}  // namespace

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
  const double na = a.norm(), nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericalDomainError("cosine similarity of a zero vector");
  return a.dot(b) / (na * nb);
}

std::vector<int> simclr_pairing(int k) {
  std::vector<int> pairing(2 * static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    pairing[i] = i + k;
    pairing[i + k] = i;
  }
  return pairing;
}

LossResult simclr_loss(const Eigen::MatrixXd& projections, std::span<const int> pairing, double tau) {
  check_tau(tau);
  const Eigen::Index n = projections.rows();
  if (n < 2 || n % 2 != 0) throw std::invalid_argument("simclr_loss needs an even number >= 2 of rows");
  if (static_cast<Eigen::Index>(pairing.size()) != n) {
    throw std::invalid_argument("pairing length must equal the number of rows");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const int j = pairing[i];
    if (j < 0 || j >= n || j == i || pairing[j] != i) {
      throw std::invalid_argument("pairing is not a perfect matching");
    }
  }

  const Eigen::VectorXd norms = row_norms(projections, "projection");
  const Eigen::MatrixXd z = projections.array().colwise() / norms.array();
  const Eigen::MatrixXd logits = (z * z.transpose()) / tau;

  LossResult result;
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double max_logit = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < n; ++k) {
      if (k != i) max_logit = std::max(max_logit, logits(i, k));
    }
    double denom = 0.0;
    for (Eigen::Index k = 0; k < n; ++k) {
      if (k == i) continue;
      g(i, k) = std::exp(logits(i, k) - max_logit);
      denom += g(i, k);
    }
    const Eigen::Index j = pairing[i];
    result.value += max_logit + std::log(denom) - logits(i, j);
    g.row(i) /= denom;
    g(i, j) -= 1.0;
  }
  const Eigen::MatrixXd grad_z = ((g + g.transpose()) * z) / tau;
  result.grad = normalize_backward(z, norms, grad_z);
  return result;
}

MocoLossResult moco_loss(const Eigen::VectorXd& query, const Eigen::VectorXd& positive_key,
                         const Eigen::MatrixXd& dictionary, double tau) {
  if (dictionary.rows() > 0 && dictionary.cols() != query.size()) {
    throw std::invalid_argument("dictionary key length does not match the query");
  }
  const LossResult batch = moco_batch_loss(query.transpose(), positive_key.transpose(), dictionary, tau);
  return {batch.value, batch.grad.row(0).transpose()};
}

LossResult moco_batch_loss(const Eigen::MatrixXd& queries, const Eigen::MatrixXd& keys,
                           const Eigen::MatrixXd& dictionary, double tau) {
  check_tau(tau);
  if (queries.rows() != keys.rows() || queries.cols() != keys.cols()) {
    throw std::invalid_argument("queries and keys must have the same shape");
  }
  if (dictionary.rows() > 0 && dictionary.cols() != queries.cols()) {
    throw std::invalid_argument("dictionary key length does not match the queries");
  }
  const Eigen::VectorXd qn = row_norms(queries, "query");
  const Eigen::MatrixXd q = queries.array().colwise() / qn.array();
  const Eigen::MatrixXd k = keys.array().colwise() / row_norms(keys, "key").array();
  Eigen::MatrixXd d;
  if (dictionary.rows() > 0) d = dictionary.array().colwise() / row_norms(dictionary, "dictionary").array();

  const Eigen::VectorXd pos = (q.array() * k.array()).rowwise().sum().matrix() / tau;
  const Eigen::MatrixXd neg = dictionary.rows() > 0 ? Eigen::MatrixXd((q * d.transpose()) / tau)
                                                    : Eigen::MatrixXd(q.rows(), 0);

  LossResult result;
  Eigen::VectorXd p_pos(q.rows());
  Eigen::MatrixXd p_neg(q.rows(), neg.cols());
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    double m = pos(i);
    if (neg.cols() > 0) m = std::max(m, neg.row(i).maxCoeff());
    const double e_pos = std::exp(pos(i) - m);
    double denom = e_pos;
    for (Eigen::Index j = 0; j < neg.cols(); ++j) {
      p_neg(i, j) = std::exp(neg(i, j) - m);
      denom += p_neg(i, j);
    }
    result.value += m + std::log(denom) - pos(i);
    p_pos(i) = e_pos / denom;
    p_neg.row(i) /= denom;
  }
  Eigen::MatrixXd grad_q = (k.array().colwise() * (p_pos.array() - 1.0)).matrix();
  if (neg.cols() > 0) grad_q += p_neg * d;
  grad_q /= tau;
  result.grad = normalize_backward(q, qn, grad_q);
  return result;
}

}  // namespace poisonlab
