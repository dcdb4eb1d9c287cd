#include "boosts/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

namespace boosts {

MetricReport metrics(const Eigen::VectorXd& y_true, const Eigen::VectorXd& y_pred, ReMode re_mode) {
    const auto n = y_true.size();
    if (n == 0) throw ValidationError("metrics: empty input");
    if (y_pred.size() != n) throw ValidationError("metrics: length mismatch");

    const Eigen::VectorXd e = y_true - y_pred;
    MetricReport rep;
    rep.n_test = n;
    rep.mge = e.cwiseAbs().mean();
    rep.rmse = std::sqrt(e.squaredNorm() / static_cast<double>(n));

    if (re_mode == ReMode::Aggregate) {
        const double denom = y_true.cwiseAbs().sum();
        const double num = e.cwiseAbs().sum();
        if (denom == 0.0) {
            if (num > 0.0) throw ValidationError("metrics: relative error undefined (sum |y| = 0)");
            rep.re_percent = 0.0;
        } else {
            rep.re_percent = 100.0 * num / denom;
        }
    } else {
        double acc = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (y_true(i) == 0.0) {
                throw ValidationError("metrics: per-point relative error undefined at y=0 (index " +
                                      std::to_string(i) + ")");
            }
            acc += std::abs(e(i)) / std::abs(y_true(i));
        }
        rep.re_percent = 100.0 * acc / static_cast<double>(n);
    }
    return rep;
}

namespace {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace

double wilcoxon_one_sided(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const auto n_in = a.size();
    if (b.size() != n_in) throw ValidationError("wilcoxon: length mismatch");
    if (n_in < 5) throw ValidationError("wilcoxon: need at least 5 pairs");

    std::vector<double> diffs;
    diffs.reserve(static_cast<std::size_t>(n_in));
    for (Eigen::Index i = 0; i < n_in; ++i) {
        const double d = a(i) - b(i);
        if (d != 0.0) diffs.push_back(d);  // classic zero handling: drop
    }
    if (diffs.empty()) throw ValidationError("wilcoxon: all differences are zero (p undefined)");
    const int n = static_cast<int>(diffs.size());

    // midranks of |d|
    std::vector<int> order(diffs.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int x, int y) {
        return std::abs(diffs[static_cast<std::size_t>(x)]) < std::abs(diffs[static_cast<std::size_t>(y)]);
    });
    std::vector<double> rank(diffs.size());
    std::vector<int> tie_sizes;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() &&
               std::abs(diffs[static_cast<std::size_t>(order[j])]) ==
                   std::abs(diffs[static_cast<std::size_t>(order[i])])) {
            ++j;
        }
        const double mid = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t k = i; k < j; ++k) rank[static_cast<std::size_t>(order[k])] = mid;
        tie_sizes.push_back(static_cast<int>(j - i));
        i = j;
    }

    double w_plus = 0.0;  // rank sum of positive differences (a > b)
    for (std::size_t i = 0; i < diffs.size(); ++i) {
        if (diffs[i] > 0.0) w_plus += rank[i];
    }

    if (n <= 12) {
        // exact: enumerate all sign assignments over the observed ranks
        const std::uint64_t total = 1ULL << n;
        std::uint64_t count = 0;
        for (std::uint64_t mask = 0; mask < total; ++mask) {
            double t = 0.0;
            for (int i = 0; i < n; ++i) {
                if (mask & (1ULL << i)) t += rank[static_cast<std::size_t>(i)];
            }
            if (t <= w_plus) ++count;
        }
        return static_cast<double>(count) / static_cast<double>(total);
    }

    const double nn = n;
    const double mu = nn * (nn + 1.0) / 4.0;
    double tie_term = 0.0;
    for (int t : tie_sizes) {
        tie_term += static_cast<double>(t) * t * t - t;
    }
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
    if (!(var > 0.0)) throw NumericalError("wilcoxon: zero variance under ties");
    const double z = (w_plus + 0.5 - mu) / std::sqrt(var);
    return normal_cdf(z);
}

Ensemble baseline_identity_boosting(const SpatialDataset& ds, const SplitIndices& split,
                                    FitConfig cfg) {
    CovarianceParams identity;
    identity.nugget = 1.0;
    identity.sill = 0.0;
    identity.range = 1.0;
    identity.family = cfg.family;
    cfg.fixed_covariance = identity;
    return fit(ds, split, cfg);
}

GlsRegressionResult baseline_gls_regression(const SpatialDataset& ds, const SplitIndices& split,
                                            CovFamily family, bool ols, int max_iter, double tol,
                                            int n_bins) {
    ds.validate();
    if (split.train.empty() || split.test.empty()) {
        throw ValidationError("gls_regression: split needs train and test rows");
    }
    const auto nt = static_cast<Eigen::Index>(split.train.size());
    const auto p = ds.n_features() + 1;
    Eigen::MatrixXd design(nt, p);
    Eigen::MatrixXd locs(nt, ds.dim());
    Eigen::VectorXd y(nt);
    for (Eigen::Index i = 0; i < nt; ++i) {
        const int row = split.train[static_cast<std::size_t>(i)];
        design(i, 0) = 1.0;
        design.row(i).tail(ds.n_features()) = ds.features.row(row);
        locs.row(i) = ds.locations.row(row);
        y(i) = ds.response(row);
    }

    GlsRegressionResult result;
    if (ols) {
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
        if (qr.rank() < p) {
            throw ValidationError("gls_regression: rank-deficient design (rank " +
                                  std::to_string(qr.rank()) + " < " + std::to_string(p) + ")");
        }
        result.coefficients = qr.solve(y);
        result.params.nugget = 1.0;
        result.params.sill = 0.0;
        result.params.range = 1.0;
        result.params.family = family;
    } else {
        const FglsResult fgls = fgls_linear_model(design, y, locs, family, max_iter, tol, n_bins);
        result.coefficients = fgls.trend;
        result.params = fgls.params;
    }

    result.train_predictions = design * result.coefficients;
    const auto ntest = static_cast<Eigen::Index>(split.test.size());
    result.predictions.resize(ntest);
    for (Eigen::Index i = 0; i < ntest; ++i) {
        const int row = split.test[static_cast<std::size_t>(i)];
        double pred = result.coefficients(0);
        for (Eigen::Index j = 0; j < ds.n_features(); ++j) {
            pred += result.coefficients(j + 1) * ds.features(row, j);
        }
        result.predictions(i) = pred;
    }
    return result;
}

ComparisonResult run_comparison(const SimSpec& base_spec, const FitConfig& cfg, int replicates,
                                double fraction, unsigned workers) {
    if (replicates < 1) throw ValidationError("run_comparison: replicates must be >= 1");
    ComparisonResult result;
    result.reports.resize(static_cast<std::size_t>(replicates));

    parallel_for(static_cast<std::size_t>(replicates), workers, [&](std::size_t rep) {
        SimSpec spec = base_spec;
        spec.seed = base_spec.seed + rep;
        const SimResult sim = simulate(spec);
        const SplitIndices sp = split(sim.dataset, fraction, spec.seed);

        Eigen::VectorXd y_test(static_cast<Eigen::Index>(sp.test.size()));
        Eigen::MatrixXd x_test(static_cast<Eigen::Index>(sp.test.size()), sim.dataset.n_features());
        for (std::size_t i = 0; i < sp.test.size(); ++i) {
            y_test(static_cast<Eigen::Index>(i)) = sim.dataset.response(sp.test[i]);
            x_test.row(static_cast<Eigen::Index>(i)) = sim.dataset.features.row(sp.test[i]);
        }

        FitConfig run_cfg = cfg;
        run_cfg.workers = 1;  // outer loop already parallel
        const Ensemble spatial = fit(sim.dataset, sp, run_cfg);
        const Ensemble blind = baseline_identity_boosting(sim.dataset, sp, run_cfg);
        const auto gls = baseline_gls_regression(sim.dataset, sp, run_cfg.family, false,
                                                 run_cfg.fgls_max_iter, run_cfg.fgls_tol,
                                                 run_cfg.variogram_bins);
        const auto ols = baseline_gls_regression(sim.dataset, sp, run_cfg.family, true);

        auto& row = result.reports[rep];
        row[0] = metrics(y_test, spatial.predict(x_test));
        row[1] = metrics(y_test, blind.predict(x_test));
        row[2] = metrics(y_test, gls.predictions);
        row[3] = metrics(y_test, ols.predictions);
    });

    for (int metric = 0; metric < 3; ++metric) {
        Eigen::VectorXd ours(replicates);
        auto pick = [metric](const MetricReport& r) {
            return metric == 0 ? r.mge : metric == 1 ? r.re_percent : r.rmse;
        };
        for (int i = 0; i < replicates; ++i) ours(i) = pick(result.reports[static_cast<std::size_t>(i)][0]);
        result.p_values[static_cast<std::size_t>(metric)][0] = std::numeric_limits<double>::quiet_NaN();
        for (int m = 1; m < 4; ++m) {
            Eigen::VectorXd theirs(replicates);
            for (int i = 0; i < replicates; ++i) {
                theirs(i) = pick(result.reports[static_cast<std::size_t>(i)][static_cast<std::size_t>(m)]);
            }
            // alternative: the spatial model's errors are smaller
            result.p_values[static_cast<std::size_t>(metric)][static_cast<std::size_t>(m)] =
                wilcoxon_one_sided(ours, theirs);
        }
    }
    return result;
}

void write_comparison_csv(const ComparisonResult& result, const std::string& out_dir) {
    const std::array<const char*, 3> files = {"compare_mge.csv", "compare_re.csv", "compare_rmse.csv"};
    for (int metric = 0; metric < 3; ++metric) {
        const std::string path = out_dir + "/" + files[static_cast<std::size_t>(metric)];
        std::ofstream out(path);
        if (!out) throw IoError("write_comparison_csv: cannot open '" + path + "'");
        out << "replicate";
        for (const char* m : kCompareMethods) out << "," << m;
        out << "\n";
        char buf[64];
        auto pick = [metric](const MetricReport& r) {
            return metric == 0 ? r.mge : metric == 1 ? r.re_percent : r.rmse;
        };
        for (std::size_t i = 0; i < result.reports.size(); ++i) {
            out << (i + 1);
            for (int m = 0; m < 4; ++m) {
                std::snprintf(buf, sizeof(buf), ",%.17g", pick(result.reports[i][static_cast<std::size_t>(m)]));
                out << buf;
            }
            out << "\n";
        }
        out << "wilcoxon_p,NA";
        for (int m = 1; m < 4; ++m) {
            std::snprintf(buf, sizeof(buf), ",%.17g",
                          result.p_values[static_cast<std::size_t>(metric)][static_cast<std::size_t>(m)]);
            out << buf;
        }
        out << "\n";
    }
}

}  // namespace boosts
