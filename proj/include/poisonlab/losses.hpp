#pragma once

#include <span>
#include <vector>

#include <Eigen/Core>

namespace poisonlab {

struct LossResult {
  double value = 0.0;
  Eigen::MatrixXd grad;  // same shape as the differentiated input
};

// Cosine similarity; throws NumericalDomainError on a zero vector.
double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

// Standard SimCLR pairing of 2K rows: view i of input k sits at row k and
// row k + K.
std::vector<int> simclr_pairing(int k);

// NT-Xent: sum over every row i of
//   -log( exp(sim(u_i, u_pair(i))/tau) / sum_{k != i} exp(sim(u_i, u_k)/tau) ),
// i.e. both ordered directions of each positive pair. Rows of `projections`
// are the projected views; `pairing` must be a perfect matching.
LossResult simclr_loss(const Eigen::MatrixXd& projections, std::span<const int> pairing, double tau);

// Single query against its positive key and a dictionary of negatives (one
// key per row). The positive key is always included in the denominator. Keys
// are constants; grad is with respect to the query.
struct MocoLossResult {
  double value = 0.0;
  Eigen::VectorXd grad;
};
MocoLossResult moco_loss(const Eigen::VectorXd& query, const Eigen::VectorXd& positive_key,
                         const Eigen::MatrixXd& dictionary, double tau);

// Sum of moco_loss over the rows of `queries` paired with the rows of `keys`,
// all sharing one dictionary. grad is with respect to `queries`.
LossResult moco_batch_loss(const Eigen::MatrixXd& queries, const Eigen::MatrixXd& keys,
                           const Eigen::MatrixXd& dictionary, double tau);

}  // namespace poisonlab
