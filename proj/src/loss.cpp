#include "boosts/loss.hpp"

#include <algorithm>
#include <cmath>

namespace boosts {

HessianOperator::HessianOperator(SpdFactor factor, int dense_cap) : factor_(std::move(factor)) {
    if (factor_.size() == 0) throw ValidationError("HessianOperator: empty factor");
    if (factor_.size() <= dense_cap) {
        const auto n = factor_.size();
        const Eigen::MatrixXd identity = Eigen::MatrixXd::Identity(n, n);
        Eigen::MatrixXd inv = factor_.solve(identity);
        // 2 * Sigma^-1, symmetrized exactly
        Eigen::MatrixXd h = inv + inv.transpose();
        dense_ = std::make_shared<const Eigen::MatrixXd>(std::move(h));
    }
}

const Eigen::MatrixXd& HessianOperator::dense() const {
    if (!dense_) throw ValidationError("HessianOperator: dense Hessian not materialized");
    return *dense_;
}

Eigen::VectorXd HessianOperator::multiply(const Eigen::VectorXd& v) const {
    if (v.size() != size()) throw ValidationError("HessianOperator::multiply: dimension mismatch");
    if (dense_) return (*dense_) * v;
    return 2.0 * factor_.solve(v);
}

Eigen::VectorXd HessianOperator::indicator_sums(const std::vector<int>& idx) const {
    const auto n = size();
    if (dense_) {
        Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
        for (int j : idx) out += dense_->col(j);
        return out;
    }
    Eigen::VectorXd ind = Eigen::VectorXd::Zero(n);
    for (int j : idx) ind(j) = 1.0;
    return 2.0 * factor_.solve(ind);
}

Eigen::MatrixXd HessianOperator::sub_block(const std::vector<int>& idx) const {
    const auto k = static_cast<Eigen::Index>(idx.size());
    Eigen::MatrixXd out(k, k);
    if (dense_) {
        for (Eigen::Index a = 0; a < k; ++a) {
            for (Eigen::Index b = 0; b < k; ++b) {
                out(a, b) = (*dense_)(idx[static_cast<std::size_t>(a)], idx[static_cast<std::size_t>(b)]);
            }
        }
        return out;
    }
    Eigen::MatrixXd cols(size(), k);
    Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(size(), k);
    for (Eigen::Index a = 0; a < k; ++a) basis(idx[static_cast<std::size_t>(a)], a) = 1.0;
    cols = 2.0 * factor_.solve(basis);
    for (Eigen::Index a = 0; a < k; ++a) {
        for (Eigen::Index b = 0; b < k; ++b) {
            out(a, b) = cols(idx[static_cast<std::size_t>(a)], b);
        }
    }
    // the factor path loses exact symmetry; restore it
    out = ((out + out.transpose()) * 0.5).eval();
    return out;
}

double HessianOperator::total_sum() const {
    if (dense_) return dense_->sum();
    std::vector<int> all(static_cast<std::size_t>(size()));
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    return indicator_sums(all).sum();
}

LossState compute_loss_state(const Eigen::VectorXd& residual, const SpdFactor& factor, int dense_cap) {
    if (residual.size() != factor.size()) {
        throw ValidationError("compute_loss_state: residual/factor dimension mismatch");
    }
    return compute_loss_state(residual, std::make_shared<const HessianOperator>(factor, dense_cap));
}

LossState compute_loss_state(const Eigen::VectorXd& residual,
                             std::shared_ptr<const HessianOperator> hessian) {
    if (!hessian) throw ValidationError("compute_loss_state: null Hessian");
    if (residual.size() != hessian->size()) {
        throw ValidationError("compute_loss_state: residual/Hessian dimension mismatch");
    }
    if (!residual.allFinite()) throw ValidationError("compute_loss_state: non-finite residual");
    LossState state;
    state.residual = residual;
    state.gradient = -hessian->multiply(residual);  // g = -H r identically
    state.loss_value = hessian->factor().quad_form(residual);
    state.hessian = std::move(hessian);
    return state;
}

namespace {

void check_partition(const std::vector<std::vector<int>>& partition, Eigen::Index n) {
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    std::size_t covered = 0;
    for (const auto& leaf : partition) {
        if (leaf.empty()) throw ValidationError("extract_blocks: empty leaf in partition");
        for (int i : leaf) {
            if (i < 0 || i >= n) throw ValidationError("extract_blocks: index out of range");
            if (seen[static_cast<std::size_t>(i)]) {
                throw ValidationError("extract_blocks: index " + std::to_string(i) +
                                      " appears in more than one leaf");
            }
            seen[static_cast<std::size_t>(i)] = 1;
            ++covered;
        }
    }
    if (covered != static_cast<std::size_t>(n)) {
        throw ValidationError("extract_blocks: partition covers " + std::to_string(covered) +
                              " of " + std::to_string(n) + " indices");
    }
}

}  // namespace

LeafBlocks extract_blocks(const LossState& state, const std::vector<std::vector<int>>& partition) {
    const auto n = state.n();
    check_partition(partition, n);
    const int T = static_cast<int>(partition.size());

    LeafBlocks blocks;
    blocks.leaves = partition;
    for (auto& leaf : blocks.leaves) std::sort(leaf.begin(), leaf.end());

    blocks.grad_sums.resize(T);
    blocks.col_cache.resize(n, T);
    for (int q = 0; q < T; ++q) {
        double gs = 0.0;
        for (int i : blocks.leaves[static_cast<std::size_t>(q)]) gs += state.gradient(i);
        blocks.grad_sums(q) = gs;
        blocks.col_cache.col(q) = state.hessian->indicator_sums(blocks.leaves[static_cast<std::size_t>(q)]);
    }

    blocks.block_sums.resize(T, T);
    for (int p = 0; p < T; ++p) {
        for (int q = 0; q < T; ++q) {
            double s = 0.0;
            for (int i : blocks.leaves[static_cast<std::size_t>(p)]) s += blocks.col_cache(i, q);
            blocks.block_sums(p, q) = s;
        }
    }
    blocks.block_sums = ((blocks.block_sums + blocks.block_sums.transpose()) * 0.5).eval();
    return blocks;
}

LeafBlocks split_blocks(const LossState& state, const LeafBlocks& blocks, int p,
                        const std::vector<int>& left) {
    const int T = blocks.n_leaves();
    if (p < 0 || p >= T) throw ValidationError("split_blocks: leaf index out of range");
    const auto& parent = blocks.leaves[static_cast<std::size_t>(p)];
    if (left.empty() || left.size() >= parent.size()) {
        throw ValidationError("split_blocks: left subset must be a proper nonempty subset of the leaf");
    }

    std::vector<int> left_sorted = left;
    std::sort(left_sorted.begin(), left_sorted.end());
    std::vector<int> right;
    right.reserve(parent.size() - left_sorted.size());
    {
        std::size_t li = 0;
        for (int i : parent) {
            if (li < left_sorted.size() && left_sorted[li] == i) {
                ++li;
            } else {
                right.push_back(i);
            }
        }
        if (li != left_sorted.size()) {
            throw ValidationError("split_blocks: left subset contains indices outside the leaf");
        }
    }

    LeafBlocks out;
    out.leaves = blocks.leaves;
    out.leaves[static_cast<std::size_t>(p)] = left_sorted;
    out.leaves.push_back(right);
    const int Tn = T + 1;

    out.grad_sums.resize(Tn);
    double g_left = 0.0;
    for (int i : left_sorted) g_left += state.gradient(i);
    for (int q = 0; q < T; ++q) out.grad_sums(q) = blocks.grad_sums(q);
    out.grad_sums(p) = g_left;
    out.grad_sums(T) = blocks.grad_sums(p) - g_left;

    // New cache columns: the left column needs one Hessian access; the right
    // column is the parent's column minus it.
    out.col_cache.resize(state.n(), Tn);
    out.col_cache.leftCols(T) = blocks.col_cache;
    Eigen::VectorXd c_left = state.hessian->indicator_sums(left_sorted);
    out.col_cache.col(p) = c_left;
    out.col_cache.col(T) = blocks.col_cache.col(p) - c_left;

    out.block_sums.resize(Tn, Tn);
    out.block_sums.topLeftCorner(T, T) = blocks.block_sums;
    for (int q = 0; q < Tn; ++q) {
        double s_left = 0.0;
        for (int i : left_sorted) s_left += out.col_cache(i, q);
        if (q < T && q != p) {
            out.block_sums(p, q) = s_left;
            out.block_sums(q, p) = s_left;
            const double s_right = blocks.block_sums(p, q) - s_left;
            out.block_sums(T, q) = s_right;
            out.block_sums(q, T) = s_right;
        }
    }
    double s_ll = 0.0, s_lr = 0.0;
    for (int i : left_sorted) {
        s_ll += out.col_cache(i, p);
        s_lr += out.col_cache(i, T);
    }
    double s_rr = 0.0;
    for (int i : right) s_rr += out.col_cache(i, T);
    out.block_sums(p, p) = s_ll;
    out.block_sums(p, T) = s_lr;
    out.block_sums(T, p) = s_lr;
    out.block_sums(T, T) = s_rr;
    return out;
}

}  // namespace boosts
