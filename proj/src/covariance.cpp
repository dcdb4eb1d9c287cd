#include "boosts/covariance.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace boosts {

namespace {

void check_no_duplicate_rows(const Eigen::MatrixXd& m, const char* context) {
    std::vector<int> order(static_cast<std::size_t>(m.rows()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            if (m(a, c) != m(b, c)) return m(a, c) < m(b, c);
        }
        return a < b;
    });
    for (std::size_t k = 1; k < order.size(); ++k) {
        if ((m.row(order[k - 1]).array() == m.row(order[k]).array()).all()) {
            throw ValidationError(std::string(context) + ": duplicate coordinates at rows " +
                                  std::to_string(std::min(order[k - 1], order[k])) + "," +
                                  std::to_string(std::max(order[k - 1], order[k])));
        }
    }
}

double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Lloyd's algorithm with k-means++ seeding. Deterministic given rng state;
// empty clusters are repaired by stealing the point farthest from its
// assigned center.
Eigen::MatrixXd kmeans_centers(const Eigen::MatrixXd& points, int k, Rng& rng) {
    const auto n = points.rows();
    const auto d = points.cols();
    if (k > n) k = static_cast<int>(n);

    Eigen::MatrixXd centers(k, d);
    centers.row(0) = points.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n))));
    Eigen::VectorXd dist2 = (points.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (int c = 1; c < k; ++c) {
        const double total = dist2.sum();
        Eigen::Index pick = 0;
        if (total > 0.0) {
            const double r = rng.uniform() * total;
            double cum = 0.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                cum += dist2(i);
                if (cum >= r) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = static_cast<Eigen::Index>(c) % n;
        }
        centers.row(c) = points.row(pick);
        dist2 = dist2.cwiseMin((points.rowwise() - centers.row(c)).rowwise().squaredNorm());
    }

    std::vector<int> assign(static_cast<std::size_t>(n), -1);
    for (int iter = 0; iter < 50; ++iter) {
        bool changed = false;
        for (Eigen::Index i = 0; i < n; ++i) {
            int best = 0;
            double best_d = (points.row(i) - centers.row(0)).squaredNorm();
            for (int c = 1; c < k; ++c) {
                const double dd = (points.row(i) - centers.row(c)).squaredNorm();
                if (dd < best_d) {
                    best_d = dd;
                    best = c;
                }
            }
            if (assign[static_cast<std::size_t>(i)] != best) {
                assign[static_cast<std::size_t>(i)] = best;
                changed = true;
            }
        }
        if (!changed && iter > 0) break;

        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, d);
        std::vector<int> counts(static_cast<std::size_t>(k), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            sums.row(assign[static_cast<std::size_t>(i)]) += points.row(i);
            ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) {
                centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
            } else {
                Eigen::Index far = 0;
                double far_d = -1.0;
                for (Eigen::Index i = 0; i < n; ++i) {
                    const double dd = (points.row(i) - centers.row(assign[static_cast<std::size_t>(i)])).squaredNorm();
                    if (dd > far_d) {
                        far_d = dd;
                        far = i;
                    }
                }
                centers.row(c) = points.row(far);
                assign[static_cast<std::size_t>(far)] = c;
            }
        }
    }
    return centers;
}

// Nelder-Mead on a smooth unconstrained objective; two rounds with a
// shrinking initial step give tight convergence at negligible cost for the
// 3-parameter problems this file solves.
Eigen::VectorXd nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                            const Eigen::VectorXd& x0, double step, int max_iter) {
    const int n = static_cast<int>(x0.size());
    std::vector<Eigen::VectorXd> xs(static_cast<std::size_t>(n) + 1, x0);
    std::vector<double> fs(static_cast<std::size_t>(n) + 1);
    for (int i = 0; i < n; ++i) xs[static_cast<std::size_t>(i) + 1](i) += step;
    for (std::size_t i = 0; i < xs.size(); ++i) fs[i] = f(xs[i]);

    std::vector<int> ord(xs.size());
    for (std::size_t i = 0; i < ord.size(); ++i) ord[i] = static_cast<int>(i);
    auto sort_ord = [&] {
        std::sort(ord.begin(), ord.end(), [&](int a, int b) { return fs[static_cast<std::size_t>(a)] < fs[static_cast<std::size_t>(b)]; });
    };

    for (int it = 0; it < max_iter; ++it) {
        sort_ord();
        const int best = ord.front(), worst = ord.back(), second_worst = ord[ord.size() - 2];
        if (std::abs(fs[static_cast<std::size_t>(worst)] - fs[static_cast<std::size_t>(best)]) <=
            1e-15 * (std::abs(fs[static_cast<std::size_t>(best)]) + 1e-15)) {
            break;
        }
        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
        for (int i : ord) {
            if (i != worst) centroid += xs[static_cast<std::size_t>(i)];
        }
        centroid /= n;

        const Eigen::VectorXd refl = centroid + (centroid - xs[static_cast<std::size_t>(worst)]);
        const double f_refl = f(refl);
        if (f_refl < fs[static_cast<std::size_t>(best)]) {
            const Eigen::VectorXd exp_pt = centroid + 2.0 * (centroid - xs[static_cast<std::size_t>(worst)]);
            const double f_exp = f(exp_pt);
            if (f_exp < f_refl) {
                xs[static_cast<std::size_t>(worst)] = exp_pt;
                fs[static_cast<std::size_t>(worst)] = f_exp;
            } else {
                xs[static_cast<std::size_t>(worst)] = refl;
                fs[static_cast<std::size_t>(worst)] = f_refl;
            }
        } else if (f_refl < fs[static_cast<std::size_t>(second_worst)]) {
            xs[static_cast<std::size_t>(worst)] = refl;
            fs[static_cast<std::size_t>(worst)] = f_refl;
        } else {
            const Eigen::VectorXd contr = centroid + 0.5 * (xs[static_cast<std::size_t>(worst)] - centroid);
            const double f_contr = f(contr);
            if (f_contr < fs[static_cast<std::size_t>(worst)]) {
                xs[static_cast<std::size_t>(worst)] = contr;
                fs[static_cast<std::size_t>(worst)] = f_contr;
            } else {
                for (std::size_t i = 0; i < xs.size(); ++i) {
                    if (static_cast<int>(i) == best) continue;
                    xs[i] = xs[static_cast<std::size_t>(best)] + 0.5 * (xs[i] - xs[static_cast<std::size_t>(best)]);
                    fs[i] = f(xs[i]);
                }
            }
        }
    }
    sort_ord();
    return xs[static_cast<std::size_t>(ord.front())];
}

struct VariogramObjective {
    const EmpiricalSemivariogram& emp;
    CovFamily family;
    double model_floor;

    CovarianceParams decode(const Eigen::VectorXd& x) const {
        CovarianceParams p;
        p.nugget = x(0) * x(0);
        p.sill = x(1) * x(1);
        p.range = std::exp(std::clamp(x(2), -50.0, 50.0));
        p.family = family;
        return p;
    }

    double operator()(const Eigen::VectorXd& x) const {
        const CovarianceParams p = decode(x);
        double obj = 0.0;
        for (Eigen::Index b = 0; b < emp.n_bins(); ++b) {
            const double model = std::max(p.semivariance(emp.bin_centers(b)), model_floor);
            const double ratio = emp.semivariances(b) / model - 1.0;
            obj += static_cast<double>(emp.pair_counts[static_cast<std::size_t>(b)]) * ratio * ratio;
        }
        return obj;
    }
};

}  // namespace

std::string to_string(CovFamily f) {
    return f == CovFamily::Gaussian ? "gaussian" : "exponential";
}

CovFamily cov_family_from_string(const std::string& s) {
    if (s == "gaussian") return CovFamily::Gaussian;
    if (s == "exponential") return CovFamily::Exponential;
    throw ValidationError("unknown covariance family '" + s + "' (expected gaussian|exponential)");
}

void CovarianceParams::validate() const {
    if (!std::isfinite(nugget) || !std::isfinite(sill) || !std::isfinite(range)) {
        throw ValidationError("covariance params: non-finite field");
    }
    if (nugget < 0.0 || sill < 0.0) throw ValidationError("covariance params: nugget and sill must be >= 0");
    if (!(range > 0.0)) throw ValidationError("covariance params: range must be > 0");
    if (!(nugget + sill > 0.0)) throw ValidationError("covariance params: nugget + sill must be > 0");
}

double CovarianceParams::covariance(double h) const {
    if (h == 0.0) return nugget + sill;
    if (family == CovFamily::Gaussian) return sill * std::exp(-(h * h) / (range * range));
    return sill * std::exp(-h / range);
}

double CovarianceParams::semivariance(double h) const {
    if (h == 0.0) return 0.0;
    if (family == CovFamily::Gaussian) return nugget + sill * (1.0 - std::exp(-(h * h) / (range * range)));
    return nugget + sill * (1.0 - std::exp(-h / range));
}

std::string CovarianceParams::to_json() const {
    nlohmann::json j;
    j["family"] = to_string(family);
    j["nugget"] = nugget;
    j["sill"] = sill;
    j["range"] = range;
    return j.dump();
}

CovarianceParams CovarianceParams::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError(std::string("covariance params: malformed JSON: ") + e.what());
    }
    CovarianceParams p;
    try {
        p.family = cov_family_from_string(j.at("family").get<std::string>());
        p.nugget = j.at("nugget").get<double>();
        p.sill = j.at("sill").get<double>();
        p.range = j.at("range").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("covariance params: bad fields: ") + e.what());
    }
    p.validate();
    return p;
}

void LwmlrConfig::validate() const {
    if (components < 1) throw ValidationError("lwmlr: components must be >= 1");
    if (auto_centers()) return;
    if (kernel_centers.rows() != components) {
        throw ValidationError("lwmlr: kernel_centers rows must equal components");
    }
    if (kernel_scales.size() != components) {
        throw ValidationError("lwmlr: kernel_scales length must equal components");
    }
    if (!kernel_centers.allFinite()) throw ValidationError("lwmlr: non-finite kernel center");
    if (!(kernel_scales.array() > 0.0).all()) throw ValidationError("lwmlr: kernel scales must be > 0");
}

LwmlrConfig LwmlrConfig::resolved(const Eigen::MatrixXd& locations) const {
    if (!auto_centers()) {
        validate();
        return *this;
    }
    if (components < 1) throw ValidationError("lwmlr: components must be >= 1");
    const auto n = locations.rows();
    const int d = static_cast<int>(locations.cols());
    LwmlrConfig out = *this;

    // Clamp J so the trend stays identifiable: J*q at most half the rows.
    const int q = basis_size(d);
    int J = std::min<int>(components, std::max<int>(1, static_cast<int>(n) / (2 * q)));
    J = std::min<int>(J, static_cast<int>(n));
    out.components = J;

    Rng rng(0);
    out.kernel_centers = kmeans_centers(locations, J, rng);

    std::vector<double> nearest(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (int c = 0; c < J; ++c) {
            best = std::min(best, (locations.row(i) - out.kernel_centers.row(c)).norm());
        }
        nearest[static_cast<std::size_t>(i)] = best;
    }
    double scale = median_of(nearest);
    if (!(scale > 0.0)) {
        std::vector<double> center_gaps;
        for (int a = 0; a < J; ++a) {
            for (int b = a + 1; b < J; ++b) {
                const double g = (out.kernel_centers.row(a) - out.kernel_centers.row(b)).norm();
                if (g > 0.0) center_gaps.push_back(g);
            }
        }
        scale = center_gaps.empty() ? 1.0 : 0.5 * median_of(center_gaps);
        if (!(scale > 0.0)) scale = 1.0;
    }
    out.kernel_scales = Eigen::VectorXd::Constant(J, scale);
    out.validate();
    return out;
}

Eigen::VectorXd SpdFactor::solve(const Eigen::VectorXd& v) const {
    if (v.size() != size()) throw ValidationError("SpdFactor::solve: dimension mismatch");
    return llt_.solve(v);
}

Eigen::MatrixXd SpdFactor::solve(const Eigen::MatrixXd& m) const {
    if (m.rows() != size()) throw ValidationError("SpdFactor::solve: dimension mismatch");
    return llt_.solve(m);
}

double SpdFactor::quad_form(const Eigen::VectorXd& v) const {
    if (v.size() != size()) throw ValidationError("SpdFactor::quad_form: dimension mismatch");
    return llt_.matrixL().solve(v).squaredNorm();
}

Eigen::MatrixXd SpdFactor::whiten(const Eigen::MatrixXd& m) const {
    if (m.rows() != size()) throw ValidationError("SpdFactor::whiten: dimension mismatch");
    return llt_.matrixL().solve(m);
}

SpdFactor factorize(const Eigen::MatrixXd& sigma) {
    if (sigma.rows() != sigma.cols()) throw ValidationError("factorize: matrix must be square");
    const double scale = sigma.cwiseAbs().maxCoeff();
    const double asym = (sigma - sigma.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-12 * std::max(scale, 1e-300)) {
        throw ValidationError("factorize: matrix is not symmetric (max asymmetry " + std::to_string(asym) + ")");
    }
    SpdFactor f;
    f.llt_.compute(sigma);
    if (f.llt_.info() != Eigen::Success) {
        throw NumericalError("factorize: matrix is not positive definite");
    }
    f.log_det_ = 2.0 * f.llt_.matrixLLT().diagonal().array().log().sum();
    return f;
}

std::pair<Eigen::MatrixXd, SpdFactor> build_covariance_factored(const CovarianceParams& params,
                                                                const Eigen::MatrixXd& locations) {
    params.validate();
    check_no_duplicate_rows(locations, "build_covariance");
    const auto n = locations.rows();
    Eigen::MatrixXd sigma(n, n);
    const double diag = params.nugget + params.sill;
    for (Eigen::Index i = 0; i < n; ++i) {
        sigma(i, i) = diag;
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double h = (locations.row(i) - locations.row(j)).norm();
            const double c = params.covariance(h);
            sigma(i, j) = c;
            sigma(j, i) = c;
        }
    }

    const double unit = sigma.trace() / static_cast<double>(n);
    double jitter = 1e-10 * unit;
    const double jitter_cap = 1e-4 * unit;
    bool jittered = false;
    for (;;) {
        try {
            SpdFactor f = factorize(sigma);
            return {std::move(sigma), std::move(f)};
        } catch (const NumericalError&) {
            if (jitter > jitter_cap) break;
            // keep the cumulative diagonal addition equal to the current level
            sigma.diagonal().array() += jitter * (jittered ? 0.9 : 1.0);
            jittered = true;
            jitter *= 10.0;
        }
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sigma, Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = es.eigenvalues().maxCoeff();
    throw NumericalError("build_covariance: matrix not SPD after jitter escalation; eigenvalue range [" +
                         std::to_string(lo) + ", " + std::to_string(hi) + "], condition estimate " +
                         std::to_string(hi / std::max(lo, 1e-300)));
}

Eigen::MatrixXd build_covariance(const CovarianceParams& params, const Eigen::MatrixXd& locations) {
    return build_covariance_factored(params, locations).first;
}

EmpiricalSemivariogram empirical_semivariogram(const Eigen::VectorXd& residuals,
                                               const Eigen::MatrixXd& locations,
                                               int n_bins, double max_dist) {
    const auto n = residuals.size();
    if (locations.rows() != n) throw ValidationError("semivariogram: residual/location row mismatch");
    if (n < 2) throw ValidationError("semivariogram: need at least two observations");
    if (n_bins < 1) throw ValidationError("semivariogram: n_bins must be >= 1");

    if (max_dist <= 0.0) {
        double h_max = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = i + 1; j < n; ++j) {
                h_max = std::max(h_max, (locations.row(i) - locations.row(j)).norm());
            }
        }
        max_dist = 0.5 * h_max;
    }
    if (!(max_dist > 0.0)) throw ValidationError("semivariogram: max_dist must be positive");

    const double width = max_dist / n_bins;
    std::vector<double> sq_sums(static_cast<std::size_t>(n_bins), 0.0);
    std::vector<std::uint64_t> counts(static_cast<std::size_t>(n_bins), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double h = (locations.row(i) - locations.row(j)).norm();
            if (h > max_dist) continue;
            auto b = static_cast<std::size_t>(std::min<int>(static_cast<int>(h / width), n_bins - 1));
            const double diff = residuals(i) - residuals(j);
            sq_sums[b] += diff * diff;
            ++counts[b];
        }
    }

    EmpiricalSemivariogram emp;
    std::vector<double> centers, values;
    for (int b = 0; b < n_bins; ++b) {
        if (counts[static_cast<std::size_t>(b)] == 0) continue;
        centers.push_back((b + 0.5) * width);
        values.push_back(sq_sums[static_cast<std::size_t>(b)] /
                         (2.0 * static_cast<double>(counts[static_cast<std::size_t>(b)])));
        emp.pair_counts.push_back(counts[static_cast<std::size_t>(b)]);
    }
    if (centers.empty()) throw ValidationError("semivariogram: no pairs within max_dist (empty variogram)");
    emp.bin_centers = Eigen::Map<Eigen::VectorXd>(centers.data(), static_cast<Eigen::Index>(centers.size()));
    emp.semivariances = Eigen::Map<Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
    return emp;
}

CovarianceParams fit_variogram(const EmpiricalSemivariogram& emp, CovFamily family) {
    if (emp.n_bins() < 3) throw ValidationError("fit_variogram: need at least 3 retained bins");

    const double gamma_max = emp.semivariances.maxCoeff();
    if (!(gamma_max > 0.0)) {
        // Degenerate zero-variance field: every params choice scores the same,
        // so return the pure-nugget floor rather than failing.
        CovarianceParams p;
        p.nugget = 1e-12;
        p.sill = 0.0;
        p.range = emp.bin_centers(emp.n_bins() - 1);
        p.family = family;
        return p;
    }

    const VariogramObjective objective{emp, family, 1e-12 * std::max(1.0, gamma_max)};

    const double h_first = emp.bin_centers(0);
    const double h_last = emp.bin_centers(emp.n_bins() - 1);
    const double gamma_mean = emp.semivariances.mean();

    const double nugget0 = std::max(0.5 * emp.semivariances(0), 1e-8 * gamma_max);
    const double sill0 = std::max(gamma_max - nugget0, 0.25 * gamma_mean);

    const double r_lo = std::max(0.5 * h_first, h_last / 50.0);
    const double r_hi = 2.0 * h_last;

    double best_obj = std::numeric_limits<double>::infinity();
    double best_start_obj = std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_x;
    const int n_starts = 8;
    for (int s = 0; s < n_starts; ++s) {
        const double t = n_starts == 1 ? 0.0 : static_cast<double>(s) / (n_starts - 1);
        const double r0 = r_lo * std::pow(r_hi / r_lo, t);
        Eigen::VectorXd x0(3);
        x0 << std::sqrt(nugget0), std::sqrt(sill0), std::log(r0);
        best_start_obj = std::min(best_start_obj, objective(x0));

        Eigen::VectorXd x = nelder_mead(objective, x0, 0.5, 600);
        x = nelder_mead(objective, x, 0.05, 400);  // polish
        const double fx = objective(x);
        if (fx < best_obj) {
            best_obj = fx;
            best_x = x;
        }
    }

    CovarianceParams best = objective.decode(best_x);
    if (!(best.nugget + best.sill > 0.0)) best.nugget = 1e-12;

    // a start that is already optimal counts as a solution; failure means the
    // search ended worse than where it began (or diverged to non-finite)
    if (!std::isfinite(best_obj) || best_obj > best_start_obj) {
        throw VariogramFitError("fit_variogram: optimizer failed to improve over every multistart", best);
    }
    return best;
}

Eigen::MatrixXd lwmlr_design(const Eigen::MatrixXd& locations, const LwmlrConfig& cfg_in) {
    const LwmlrConfig cfg = cfg_in.auto_centers() ? cfg_in.resolved(locations) : cfg_in;
    cfg.validate();
    const auto n = locations.rows();
    const int d = static_cast<int>(locations.cols());
    if (cfg.kernel_centers.cols() != d) {
        throw ValidationError("lwmlr_design: kernel center dimension differs from locations");
    }
    const int J = cfg.components;
    const int q = cfg.basis_size(d);

    Eigen::MatrixXd design(n, J * q);
    Eigen::VectorXd logw(J);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (int j = 0; j < J; ++j) {
            const double v = cfg.kernel_scales(j);
            const double dist2 = (locations.row(i) - cfg.kernel_centers.row(j)).squaredNorm();
            logw(j) = -d * std::log(v) - 0.5 * dist2 / (v * v);
        }
        const double m = logw.maxCoeff();
        Eigen::VectorXd w = (logw.array() - m).exp();
        const double norm = w.sum();
        if (!(norm > 0.0) || !std::isfinite(norm)) {
            throw NumericalError("lwmlr_design: kernel weights degenerate at row " + std::to_string(i));
        }
        w /= norm;
        for (int j = 0; j < J; ++j) {
            design(i, j * q) = w(j);
            for (int c = 0; c < q - 1; ++c) design(i, j * q + 1 + c) = w(j) * locations(i, c);
        }
    }
    return design;
}

namespace {

double params_rel_change(const CovarianceParams& a, const CovarianceParams& b) {
    const double var_scale = std::max(a.nugget + a.sill, 1e-30);
    const double dv = std::max(std::abs(b.nugget - a.nugget), std::abs(b.sill - a.sill)) / var_scale;
    const double dr = std::abs(b.range - a.range) / std::max(a.range, 1e-30);
    return std::max(dv, dr);
}

}  // namespace

FglsResult fgls_linear_model(const Eigen::MatrixXd& design, const Eigen::VectorXd& y,
                             const Eigen::MatrixXd& locations, CovFamily family,
                             int max_iter, double tol, int n_bins) {
    const auto n = y.size();
    const auto p = design.cols();
    if (design.rows() != n || locations.rows() != n) {
        throw ValidationError("fgls: design/response/location row mismatch");
    }
    if (n <= p) {
        throw ValidationError("fgls: need more observations than trend coefficients (n=" +
                              std::to_string(n) + ", p=" + std::to_string(p) + ")");
    }
    if (max_iter < 1) throw ValidationError("fgls: max_iter must be >= 1");
    if (!y.allFinite()) throw ValidationError("fgls: non-finite residuals");

    FglsResult result;
    SpdFactor factor;
    bool have_factor = false;
    CovarianceParams prev;

    for (int it = 0; it < max_iter; ++it) {
        Eigen::MatrixXd X = design;
        Eigen::VectorXd z = y;
        if (have_factor) {
            X = factor.whiten(design);
            z = factor.whiten(y);
        }
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
        if (qr.rank() < p) {
            throw ValidationError("fgls: rank-deficient design (rank " + std::to_string(qr.rank()) +
                                  " < " + std::to_string(p) + ")");
        }
        result.trend = qr.solve(z);

        const Eigen::VectorXd detrended = y - design * result.trend;
        const EmpiricalSemivariogram emp = empirical_semivariogram(detrended, locations, n_bins);
        const CovarianceParams params = fit_variogram(emp, family);
        result.iterations = it + 1;

        const bool converged = it > 0 && params_rel_change(prev, params) < tol;
        prev = params;
        result.params = params;
        if (converged || it + 1 == max_iter) break;

        factor = build_covariance_factored(params, locations).second;
        have_factor = true;
    }
    return result;
}

FglsResult fgls_estimate(const Eigen::VectorXd& residuals, const Eigen::MatrixXd& locations,
                         const LwmlrConfig& cfg, CovFamily family, int max_iter, double tol,
                         int n_bins) {
    const LwmlrConfig resolved = cfg.resolved(locations);
    const Eigen::MatrixXd design = lwmlr_design(locations, resolved);
    return fgls_linear_model(design, residuals, locations, family, max_iter, tol, n_bins);
}

void write_variogram_csv(const EmpiricalSemivariogram& emp, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("write_variogram_csv: cannot open '" + path + "'");
    out << "bin_center,semivariance,pair_count\n";
    char buf[64];
    for (Eigen::Index b = 0; b < emp.n_bins(); ++b) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,", emp.bin_centers(b), emp.semivariances(b));
        out << buf << emp.pair_counts[static_cast<std::size_t>(b)] << "\n";
    }
}

}  // namespace boosts
