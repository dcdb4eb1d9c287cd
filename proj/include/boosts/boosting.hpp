#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "boosts/covariance.hpp"
#include "boosts/dataset.hpp"
#include "boosts/tree.hpp"

namespace boosts {

/// Everything one training run consumes. lambda/gamma/min_leaf_size/
/// max_leaves/system_form feed the per-tree grower; the covariance block
/// drives the FGLS refits between trees.
struct FitConfig {
    double lambda = 0.05;
    double gamma = 1.0;
    int n_trees = 50;  // K
    int max_leaves = 64;
    int min_leaf_size = 5;
    SystemForm system_form = SystemForm::Consistent;
    double learning_rate = 1.0;  // extension; 1.0 reproduces the plain algorithm

    CovFamily family = CovFamily::Gaussian;
    LwmlrConfig lwmlr;
    int cov_update_every = 1;   // refit stride; 0 freezes Sigma after the initial estimate
    bool detrend_fgls = true;   // false fits the variogram to raw residuals
    int fgls_max_iter = 10;
    double fgls_tol = 1e-4;
    int variogram_bins = 15;

    /// Diagnostic override: skip FGLS entirely and use this covariance for
    /// every tree. Identity (nugget 1, sill 0) reduces the fit to classical
    /// second-order boosting.
    std::optional<CovarianceParams> fixed_covariance;

    int early_stop_patience = 3;  // consecutive zero-output trees; 0 disables
    int dense_cap = 4096;
    std::uint64_t seed = 0;
    unsigned workers = 1;

    void validate() const;
    GrowConfig grow_config() const;
};

/// Fitted additive model. objective_trace has one entry per tree plus the
/// initial loss; it is the Mahalanobis objective chained across covariance
/// refits (each tree's contraction is measured under the covariance it was
/// grown with), which coincides with r' Sigma^-1 r exactly when Sigma is
/// held fixed and is non-increasing by construction in general.
struct Ensemble {
    std::vector<Tree> trees;
    std::vector<CovarianceParams> covariance_history;  // size trees + 1
    std::vector<double> objective_trace;               // size trees + 1
    FitConfig config;
    int n_features = 0;
    int n_fgls_failures = 0;  // mid-run FGLS failures (Sigma frozen), not serialized

    Eigen::VectorXd predict(const Eigen::MatrixXd& features) const;
};

/// Algorithm: r = y on the training rows, Sigma from FGLS on r, then K
/// rounds of (grow tree under current Sigma) -> (gate: keep only if the
/// penalized objective is strictly negative, else store a zero-output
/// stump) -> (update residuals) -> (refit Sigma every cov_update_every
/// trees). Early-stops after `early_stop_patience` consecutive zero-output
/// trees, which are permanent because nothing they depend on changes.
Ensemble fit(const SpatialDataset& ds, const SplitIndices& split, const FitConfig& cfg);

Eigen::VectorXd predict(const Ensemble& ens, const Eigen::MatrixXd& features);

void save(const Ensemble& ens, const std::string& path);
Ensemble load(const std::string& path);

std::string fit_config_to_json(const FitConfig& cfg);
FitConfig fit_config_from_json(const std::string& text);

}  // namespace boosts
