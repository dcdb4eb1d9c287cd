#pragma once

#include <Eigen/Dense>
#include <memory>
#include <vector>

#include "boosts/covariance.hpp"

namespace boosts {

/// The Hessian 2*Sigma^-1 of the Mahalanobis loss. The dense matrix is
/// materialized when n <= dense_cap; above that, leaf-indexed pieces are
/// computed on demand from the Cholesky factor. Immutable and shareable
/// across trees grown under the same covariance.
class HessianOperator {
public:
    static constexpr int kDefaultDenseCap = 4096;

    explicit HessianOperator(SpdFactor factor, int dense_cap = kDefaultDenseCap);

    Eigen::Index size() const { return factor_.size(); }
    bool is_dense() const { return dense_ != nullptr; }
    const Eigen::MatrixXd& dense() const;

    Eigen::VectorXd multiply(const Eigen::VectorXd& v) const;          // H v
    Eigen::VectorXd indicator_sums(const std::vector<int>& idx) const; // H 1_I
    Eigen::MatrixXd sub_block(const std::vector<int>& idx) const;      // H[I, I]
    double total_sum() const;                                          // sum_ij h_ij

    const SpdFactor& factor() const { return factor_; }

private:
    SpdFactor factor_;
    std::shared_ptr<const Eigen::MatrixXd> dense_;
};

/// Gradient, Hessian and loss value of r' Sigma^-1 r at the current
/// residuals. g = -H r holds by construction.
struct LossState {
    Eigen::VectorXd residual;
    Eigen::VectorXd gradient;
    std::shared_ptr<const HessianOperator> hessian;
    double loss_value = 0.0;

    Eigen::Index n() const { return residual.size(); }
};

LossState compute_loss_state(const Eigen::VectorXd& residual, const SpdFactor& factor,
                             int dense_cap = HessianOperator::kDefaultDenseCap);

/// Reuses an already-built Hessian operator (the covariance did not change).
LossState compute_loss_state(const Eigen::VectorXd& residual,
                             std::shared_ptr<const HessianOperator> hessian);

/// Per-leaf gradient sums and pairwise Hessian block sums for a partition of
/// the training indices. col_cache(i, q) = sum_{j in I_q} h_ij is kept so a
/// leaf can be refined by summing only the rows that move.
struct LeafBlocks {
    std::vector<std::vector<int>> leaves;  // I_p, each sorted ascending
    Eigen::VectorXd grad_sums;             // per-leaf sum of g_i
    Eigen::MatrixXd block_sums;            // S, T x T symmetric
    Eigen::MatrixXd col_cache;             // n x T

    int n_leaves() const { return static_cast<int>(leaves.size()); }
};

/// Validates that `partition` covers every index exactly once, then builds
/// the block sums.
LeafBlocks extract_blocks(const LossState& state, const std::vector<std::vector<int>>& partition);

/// Refines leaf `p` into (left, I_p \ left). The left part replaces slot p
/// and the right part is appended, so existing leaf slots keep their
/// positions. All moved sums are rearrangements of existing cached values
/// plus one Hessian block access for the new columns.
LeafBlocks split_blocks(const LossState& state, const LeafBlocks& blocks, int p,
                        const std::vector<int>& left);

}  // namespace boosts
