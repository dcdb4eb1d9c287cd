#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "boosts/loss.hpp"

namespace boosts {

/// Consistent solves (S + lambda I) w = -G, the stationarity condition of
/// the penalized quadratic. PaperLiteral builds the printed system matrix,
/// diagonal lambda + S_pp and off-diagonal (lambda + S_pq)/2, instead.
enum class SystemForm { Consistent, PaperLiteral };

std::string to_string(SystemForm f);
SystemForm system_form_from_string(const std::string& s);

struct Split {
    int feature = -1;
    double threshold = 0.0;  // x[feature] < threshold goes left
};

struct TreeNode {
    int feature = -1;
    double threshold = 0.0;
    int left = -1;   // -1 marks a leaf
    int right = -1;
    double weight = 0.0;

    bool is_leaf() const { return left < 0; }
};

struct Tree {
    std::vector<TreeNode> nodes;        // root at index 0
    Eigen::VectorXd leaf_weights;       // in leaf-slot order of the final system
    std::vector<int> leaf_assignment;   // training row -> leaf slot
    double objective_value = 0.0;       // final penalized reduced objective
    int n_singular_skipped = 0;         // candidates dropped for singular systems

    int n_leaves() const;
    bool root_only() const { return nodes.size() == 1; }

    double predict_row(const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
    Eigen::VectorXd predict(const Eigen::MatrixXd& features) const;

    /// Nested-object JSON: internal nodes {"feature","threshold","left","right"},
    /// leaves {"weight"}. Training-time bookkeeping is not serialized.
    std::string to_json() const;
    static Tree from_json(const std::string& text);
};

struct GrowConfig {
    double lambda = 0.05;
    double gamma = 1.0;
    int max_leaves = 64;
    int min_leaf_size = 5;
    SystemForm system_form = SystemForm::Consistent;
    unsigned workers = 1;

    void validate() const;
};

/// Optimal leaf weights for a fixed structure. Throws NumericalError with
/// the smallest pivot when the system is singular or indefinite.
Eigen::VectorXd solve_leaf_weights(const LeafBlocks& blocks, double lambda, SystemForm form);

/// G'w + w'Sw/2 + gamma*T + lambda*|w|^2/2 evaluated from the block sums.
double objective(const LeafBlocks& blocks, const Eigen::VectorXd& w, double lambda, double gamma);

/// Midpoints between consecutive distinct observed values inside the leaf,
/// per feature, excluding splits that would leave fewer than min_leaf_size
/// samples on either side.
std::vector<Split> enumerate_candidates(const Eigen::MatrixXd& features,
                                        const std::vector<int>& leaf,
                                        int min_leaf_size);

/// Greedy best-first growth. Every candidate re-solves the full refined
/// system; the single best split is applied only when it strictly lowers
/// the objective. Ties break to the lowest feature index, then the lowest
/// threshold, then the lowest leaf slot.
Tree grow_tree(const LossState& state, const Eigen::MatrixXd& features, const GrowConfig& cfg);

}  // namespace boosts
