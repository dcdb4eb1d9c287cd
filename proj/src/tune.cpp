#include "boosts/tune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "boosts/evaluate.hpp"

namespace boosts {

namespace {

bool degenerate(std::pair<double, double> r) { return r.first == r.second; }

double normalize(double v, std::pair<double, double> r) {
    return (v - r.first) / (r.second - r.first);
}

}  // namespace

double maxpro_score(const std::vector<std::pair<double, double>>& points,
                    std::pair<double, double> lambda_range,
                    std::pair<double, double> gamma_range) {
    const bool use_l = !degenerate(lambda_range);
    const bool use_g = !degenerate(gamma_range);
    double score = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        for (std::size_t j = i + 1; j < points.size(); ++j) {
            double denom = 1.0;
            if (use_l) {
                const double d = normalize(points[i].first, lambda_range) -
                                 normalize(points[j].first, lambda_range);
                denom *= d * d;
            }
            if (use_g) {
                const double d = normalize(points[i].second, gamma_range) -
                                 normalize(points[j].second, gamma_range);
                denom *= d * d;
            }
            score += 1.0 / denom;
        }
    }
    return score;
}

std::vector<std::pair<double, double>> lhd_candidate(int n_runs,
                                                     std::pair<double, double> lambda_range,
                                                     std::pair<double, double> gamma_range,
                                                     Rng& rng) {
    std::vector<int> perm_l(static_cast<std::size_t>(n_runs)), perm_g(static_cast<std::size_t>(n_runs));
    for (int i = 0; i < n_runs; ++i) {
        perm_l[static_cast<std::size_t>(i)] = i;
        perm_g[static_cast<std::size_t>(i)] = i;
    }
    rng.shuffle(perm_l);
    rng.shuffle(perm_g);

    auto stratum_mid = [n_runs](int s, std::pair<double, double> r) {
        if (degenerate(r)) return r.first;
        return r.first + (r.second - r.first) * (s + 0.5) / n_runs;
    };
    std::vector<std::pair<double, double>> pts(static_cast<std::size_t>(n_runs));
    for (int i = 0; i < n_runs; ++i) {
        pts[static_cast<std::size_t>(i)] = {stratum_mid(perm_l[static_cast<std::size_t>(i)], lambda_range),
                                            stratum_mid(perm_g[static_cast<std::size_t>(i)], gamma_range)};
    }
    return pts;
}

Design space_filling_design(int n_runs, std::pair<double, double> lambda_range,
                            std::pair<double, double> gamma_range, std::uint64_t seed, int pool) {
    if (n_runs < 1) throw ValidationError("design: n_runs must be >= 1");
    if (pool < 1) throw ValidationError("design: candidate pool must be >= 1");
    if (lambda_range.second < lambda_range.first || gamma_range.second < gamma_range.first) {
        throw ValidationError("design: range upper bound below lower bound");
    }

    Design design;
    if (degenerate(lambda_range)) {
        design.warnings.push_back("lambda range is degenerate; coordinate fixed at " +
                                  std::to_string(lambda_range.first));
    }
    if (degenerate(gamma_range)) {
        design.warnings.push_back("gamma range is degenerate; coordinate fixed at " +
                                  std::to_string(gamma_range.first));
    }

    Rng rng(seed);
    double best_score = std::numeric_limits<double>::infinity();
    for (int c = 0; c < pool; ++c) {
        auto cand = lhd_candidate(n_runs, lambda_range, gamma_range, rng);
        const double score = n_runs > 1 && !(degenerate(lambda_range) && degenerate(gamma_range))
                                 ? maxpro_score(cand, lambda_range, gamma_range)
                                 : 0.0;
        if (score < best_score) {
            best_score = score;
            design.points = std::move(cand);
        }
    }
    return design;
}

namespace {

double quartile(std::vector<double> sorted_values, double q) {
    const auto t = sorted_values.size();
    if (t == 0) return 0.0;
    const double pos = q * static_cast<double>(t - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    if (lo + 1 >= t) return sorted_values[t - 1];
    return sorted_values[lo] * (1.0 - frac) + sorted_values[lo + 1] * frac;
}

DesignPoint evaluate_point(const SpatialDataset& ds, const SplitIndices& inner,
                           const Eigen::VectorXd& y_val, const Eigen::MatrixXd& x_val,
                           FitConfig cfg, double lambda, double gamma) {
    cfg.lambda = lambda;
    cfg.gamma = gamma;
    const Ensemble ens = fit(ds, inner, cfg);

    DesignPoint pt;
    pt.lambda = lambda;
    pt.gamma = gamma;
    std::vector<double> leaves;
    leaves.reserve(ens.trees.size());
    int effective = 0;
    for (std::size_t k = 0; k < ens.trees.size(); ++k) {
        leaves.push_back(static_cast<double>(ens.trees[k].n_leaves()));
        const bool zero_output = ens.trees[k].root_only() && ens.trees[k].nodes.front().weight == 0.0;
        if (!zero_output) effective = static_cast<int>(k) + 1;
    }
    std::sort(leaves.begin(), leaves.end());
    pt.q25 = quartile(leaves, 0.25);
    pt.q50 = quartile(leaves, 0.50);
    pt.q75 = quartile(leaves, 0.75);
    pt.n_trees_effective = effective;
    pt.objective_final = ens.objective_trace.back();
    pt.val_rmse = metrics(y_val, ens.predict(x_val)).rmse;
    return pt;
}

// validation-RMSE minimizer subject to the leaf window, falling back to the
// unconstrained minimizer
std::pair<int, bool> recommend(const std::vector<DesignPoint>& pts) {
    int best_constrained = -1, best_any = -1;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const auto idx = static_cast<int>(i);
        if (best_any < 0 || pts[i].val_rmse < pts[static_cast<std::size_t>(best_any)].val_rmse) {
            best_any = idx;
        }
        if (pts[i].q50 >= 4.0 && pts[i].q50 <= 16.0) {
            if (best_constrained < 0 ||
                pts[i].val_rmse < pts[static_cast<std::size_t>(best_constrained)].val_rmse) {
                best_constrained = idx;
            }
        }
    }
    if (best_constrained >= 0) return {best_constrained, true};
    return {best_any, false};
}

}  // namespace

TuneResult tune(const SpatialDataset& ds, const SplitIndices& split_idx, const FitConfig& base_cfg,
                const Design& design, bool refine, unsigned workers) {
    if (design.points.empty()) throw ValidationError("tune: empty design");
    base_cfg.validate();

    // inner 80/20 split of the training rows, deterministic from the seed
    std::vector<int> train = split_idx.train;
    if (train.size() < 2) throw ValidationError("tune: need at least two training rows");
    Rng rng(base_cfg.seed ^ 0xb5ad4eceda1ce2a9ULL);
    rng.shuffle(train);
    auto n_fit = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(train.size())));
    n_fit = std::min(std::max<std::size_t>(n_fit, 1), train.size() - 1);
    SplitIndices inner;
    inner.fraction = 0.8;
    inner.seed = base_cfg.seed;
    inner.train.assign(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(n_fit));
    inner.test.assign(train.begin() + static_cast<std::ptrdiff_t>(n_fit), train.end());
    std::sort(inner.train.begin(), inner.train.end());
    std::sort(inner.test.begin(), inner.test.end());

    Eigen::VectorXd y_val(static_cast<Eigen::Index>(inner.test.size()));
    Eigen::MatrixXd x_val(static_cast<Eigen::Index>(inner.test.size()), ds.n_features());
    for (std::size_t i = 0; i < inner.test.size(); ++i) {
        y_val(static_cast<Eigen::Index>(i)) = ds.response(inner.test[i]);
        x_val.row(static_cast<Eigen::Index>(i)) = ds.features.row(inner.test[i]);
    }

    TuneResult result;
    result.warnings = design.warnings;

    auto run_design = [&](const std::vector<std::pair<double, double>>& pts) {
        std::vector<DesignPoint> out(pts.size());
        FitConfig cfg = base_cfg;
        cfg.workers = 1;
        parallel_for(pts.size(), workers, [&](std::size_t i) {
            out[i] = evaluate_point(ds, inner, y_val, x_val, cfg, pts[i].first, pts[i].second);
        });
        return out;
    };

    result.points = run_design(design.points);

    if (refine && result.points.size() >= 3) {
        std::vector<int> order(result.points.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            return result.points[static_cast<std::size_t>(a)].val_rmse <
                   result.points[static_cast<std::size_t>(b)].val_rmse;
        });
        std::pair<double, double> l_box = {result.points[static_cast<std::size_t>(order[0])].lambda,
                                           result.points[static_cast<std::size_t>(order[0])].lambda};
        std::pair<double, double> g_box = {result.points[static_cast<std::size_t>(order[0])].gamma,
                                           result.points[static_cast<std::size_t>(order[0])].gamma};
        for (int k = 1; k < 3; ++k) {
            const auto& p = result.points[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];
            l_box.first = std::min(l_box.first, p.lambda);
            l_box.second = std::max(l_box.second, p.lambda);
            g_box.first = std::min(g_box.first, p.gamma);
            g_box.second = std::max(g_box.second, p.gamma);
        }
        const Design refined = space_filling_design(static_cast<int>(design.points.size()), l_box,
                                                    g_box, base_cfg.seed + 1);
        auto refined_points = run_design(refined.points);
        result.points.insert(result.points.end(), refined_points.begin(), refined_points.end());
    }

    const auto [idx, ok] = recommend(result.points);
    result.recommended_lambda = result.points[static_cast<std::size_t>(idx)].lambda;
    result.recommended_gamma = result.points[static_cast<std::size_t>(idx)].gamma;
    result.leaf_window_satisfied = ok;
    if (!ok) {
        result.warnings.push_back(
            "no design point kept the median leaf count in [4,16]; "
            "recommending the unconstrained validation-RMSE minimizer");
    }
    return result;
}

void write_design_csv(const std::vector<DesignPoint>& points, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("write_design_csv: cannot open '" + path + "'");
    out << "lambda,gamma,q25,q50,q75,n_trees_effective,val_rmse\n";
    char buf[256];
    for (const auto& p : points) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%.17g,%d,%.17g\n", p.lambda,
                      p.gamma, p.q25, p.q50, p.q75, p.n_trees_effective, p.val_rmse);
        out << buf;
    }
}

}  // namespace boosts
