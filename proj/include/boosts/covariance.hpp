#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "boosts/common.hpp"

namespace boosts {

enum class CovFamily { Gaussian, Exponential };

std::string to_string(CovFamily f);
CovFamily cov_family_from_string(const std::string& s);

/// Isotropic covariance model: C(0) = nugget + sill, C(h) = sill * rho(h/range)
/// for h > 0, with rho Gaussian exp(-h^2/range^2) or exponential exp(-h/range).
struct CovarianceParams {
    double nugget = 0.0;   // variance at h = 0+ discontinuity
    double sill = 1.0;     // partial sill
    double range = 1.0;    // correlation length, > 0
    CovFamily family = CovFamily::Gaussian;

    void validate() const;
    double covariance(double h) const;     // C(h), h > 0 path excludes nugget
    double semivariance(double h) const;   // gamma(h) = nugget + sill*(1 - rho)

    std::string to_json() const;
    static CovarianceParams from_json(const std::string& text);

    bool operator==(const CovarianceParams&) const = default;
};

struct EmpiricalSemivariogram {
    Eigen::VectorXd bin_centers;
    Eigen::VectorXd semivariances;
    std::vector<std::uint64_t> pair_counts;

    Eigen::Index n_bins() const { return bin_centers.size(); }
};

enum class LwmlrBasis { Constant, Linear };

/// Kernel mixture used to detrend residuals before variogram estimation.
/// Empty kernel_centers means "derive from the data": J centers by k-means
/// on the locations (internal seed 0), every scale set to the median
/// distance from a location to its nearest center, J clamped so the trend
/// stays identifiable.
struct LwmlrConfig {
    int components = 4;                 // J
    Eigen::MatrixXd kernel_centers;     // J x d, may be empty (auto)
    Eigen::VectorXd kernel_scales;      // J, positive
    LwmlrBasis basis = LwmlrBasis::Linear;

    bool auto_centers() const { return kernel_centers.size() == 0; }
    int basis_size(int dim) const { return basis == LwmlrBasis::Constant ? 1 : 1 + dim; }
    void validate() const;

    /// Returns a fully specified copy with centers/scales filled in from
    /// `locations` when this config is in auto mode.
    LwmlrConfig resolved(const Eigen::MatrixXd& locations) const;
};

/// Cholesky wrapper: solves, quadratic forms and the log-determinant of an
/// SPD matrix. Construction fails rather than regularizing; diagonal repair
/// belongs to build_covariance.
class SpdFactor {
public:
    SpdFactor() = default;

    Eigen::Index size() const { return llt_.matrixLLT().rows(); }
    Eigen::VectorXd solve(const Eigen::VectorXd& v) const;
    Eigen::MatrixXd solve(const Eigen::MatrixXd& m) const;
    double quad_form(const Eigen::VectorXd& v) const;  // v' Sigma^-1 v, >= 0
    Eigen::MatrixXd whiten(const Eigen::MatrixXd& m) const;  // L^-1 m
    double log_det() const { return log_det_; }
    Eigen::MatrixXd matrix_l() const { return llt_.matrixL(); }

    friend SpdFactor factorize(const Eigen::MatrixXd& sigma);

private:
    Eigen::LLT<Eigen::MatrixXd> llt_;
    double log_det_ = 0.0;
};

/// Carries the best parameters seen when the variogram optimizer cannot
/// improve on any multistart.
struct VariogramFitError : NumericalError {
    VariogramFitError(const std::string& msg, CovarianceParams best)
        : NumericalError(msg), best_so_far(best) {}
    CovarianceParams best_so_far;
};

/// gamma_hat(h_b) = sum over pairs in bin of (r_i - r_j)^2 / (2 N_b), with
/// equal-width bins on (0, max_dist]; bins with no pairs are dropped.
/// max_dist <= 0 selects the default: half the maximum pairwise distance.
EmpiricalSemivariogram empirical_semivariogram(const Eigen::VectorXd& residuals,
                                               const Eigen::MatrixXd& locations,
                                               int n_bins = 15,
                                               double max_dist = 0.0);

/// Weighted least squares on the empirical variogram with Cressie weights,
/// objective sum_b N_b * (gamma_hat_b / gamma(h_b) - 1)^2, minimized by
/// Nelder-Mead from 8 fixed multistarts log-spaced in range.
CovarianceParams fit_variogram(const EmpiricalSemivariogram& emp, CovFamily family);

/// Assembles Sigma and verifies SPD by factorization. If the factorization
/// fails, an escalating diagonal jitter is applied, starting at
/// 1e-10 * tr(Sigma)/n and growing tenfold up to 1e-4 * tr(Sigma)/n before
/// giving up with a condition estimate.
Eigen::MatrixXd build_covariance(const CovarianceParams& params,
                                 const Eigen::MatrixXd& locations);

/// Same as build_covariance but also returns the verifying factor, so hot
/// paths do not factorize twice.
std::pair<Eigen::MatrixXd, SpdFactor> build_covariance_factored(
    const CovarianceParams& params, const Eigen::MatrixXd& locations);

/// Throws NumericalError if sigma is not SPD; requires symmetry to 1e-12
/// relative.
SpdFactor factorize(const Eigen::MatrixXd& sigma);

/// n x (J*q) design: block j is diag(pi_j) * X_j where pi_j are the
/// row-normalized Gaussian kernel weights and X_j rows are the basis k_j(s).
Eigen::MatrixXd lwmlr_design(const Eigen::MatrixXd& locations, const LwmlrConfig& cfg);

struct FglsResult {
    CovarianceParams params;
    Eigen::VectorXd trend;  // B, stacked (beta_1 .. beta_J)
    int iterations = 0;
};

/// Alternates trend estimation (OLS first, then GLS under the current
/// Sigma), detrending, variogram fitting and covariance rebuild until the
/// parameters move less than `tol` relative or max_iter passes run out.
/// Deterministic and seed-free.
FglsResult fgls_estimate(const Eigen::VectorXd& residuals,
                         const Eigen::MatrixXd& locations,
                         const LwmlrConfig& cfg,
                         CovFamily family,
                         int max_iter = 10,
                         double tol = 1e-4,
                         int n_bins = 15);

/// FGLS with a caller-supplied design matrix (used by the GLS regression
/// baseline; fgls_estimate wraps this with the LWMLR design).
FglsResult fgls_linear_model(const Eigen::MatrixXd& design,
                             const Eigen::VectorXd& y,
                             const Eigen::MatrixXd& locations,
                             CovFamily family,
                             int max_iter = 10,
                             double tol = 1e-4,
                             int n_bins = 15);

/// Variogram CSV (bin_center,semivariance,pair_count), for plotting.
void write_variogram_csv(const EmpiricalSemivariogram& emp, const std::string& path);

}  // namespace boosts
