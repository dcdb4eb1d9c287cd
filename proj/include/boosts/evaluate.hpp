#pragma once

#include <Eigen/Dense>
#include <array>
#include <string>
#include <vector>

#include "boosts/boosting.hpp"
#include "boosts/dataset.hpp"
#include "boosts/simulate.hpp"

namespace boosts {

struct MetricReport {
    double mge = 0.0;         // mean absolute error
    double re_percent = 0.0;  // 100 * sum|e| / sum|y| (aggregate ratio)
    double rmse = 0.0;
    Eigen::Index n_test = 0;
};

enum class ReMode { Aggregate, PerPoint };

/// Out-of-sample error summary, e = y_true - y_pred. The per-point RE
/// variant averages 100*|e_i|/|y_i| and refuses exact zeros in y.
MetricReport metrics(const Eigen::VectorXd& y_true, const Eigen::VectorXd& y_pred,
                     ReMode re_mode = ReMode::Aggregate);

/// One-sided paired Wilcoxon signed-rank p-value for the alternative
/// a < b. Zero differences are dropped, ties are mid-ranked; the null
/// distribution is enumerated exactly up to 12 effective pairs and
/// normal-approximated (tie and continuity corrected) above.
double wilcoxon_one_sided(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

/// The same pipeline with Sigma pinned to the identity: classical
/// second-order boosting, kept as the correlation-blind tree baseline.
Ensemble baseline_identity_boosting(const SpatialDataset& ds, const SplitIndices& split,
                                    FitConfig cfg);

struct GlsRegressionResult {
    Eigen::VectorXd coefficients;   // intercept first, then feature slopes
    CovarianceParams params;        // identity-like for the OLS variant
    Eigen::VectorXd predictions;    // test rows
    Eigen::VectorXd train_predictions;
};

/// y ~ [1, features] by FGLS (or plain OLS); predicts test rows from
/// covariates only.
GlsRegressionResult baseline_gls_regression(const SpatialDataset& ds, const SplitIndices& split,
                                            CovFamily family, bool ols = false,
                                            int max_iter = 10, double tol = 1e-4,
                                            int n_bins = 15);

/// Method order of every comparison artifact.
inline constexpr std::array<const char*, 4> kCompareMethods = {
    "boost_s", "identity_boosting", "gls_regression", "ols_regression"};

struct ComparisonResult {
    // [replicate][method]
    std::vector<std::array<MetricReport, 4>> reports;
    // [metric: mge, re, rmse][method]; p-value of method vs boost_s, NaN for boost_s itself
    std::array<std::array<double, 4>, 3> p_values;
};

/// Simulates `replicates` datasets (seed, seed+1, ...), fits all four
/// methods on a `fraction` training split of each and collects the test
/// metrics plus one-sided Wilcoxon p-values against the spatial model.
ComparisonResult run_comparison(const SimSpec& base_spec, const FitConfig& cfg, int replicates,
                                double fraction, unsigned workers = 1);

/// One Tables-style CSV per metric: replicate rows, method columns, and a
/// final Wilcoxon row ("NA" under boost_s).
void write_comparison_csv(const ComparisonResult& result, const std::string& out_dir);

}  // namespace boosts
