#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "boosts/boosting.hpp"
#include "boosts/dataset.hpp"

namespace boosts {

struct DesignPoint {
    double lambda = 0.0;
    double gamma = 0.0;
    double q25 = 0.0, q50 = 0.0, q75 = 0.0;  // per-tree leaf count quartiles
    int n_trees_effective = 0;               // trees before the zero-output tail
    double objective_final = 0.0;
    double val_rmse = 0.0;
};

struct Design {
    std::vector<std::pair<double, double>> points;  // (lambda, gamma)
    std::vector<std::string> warnings;
};

/// MaxPro score of a design on stratum-normalized coordinates:
/// sum_{i<j} prod_dims (x_i - x_j)^-2. Degenerate dimensions (zero-width
/// range) are skipped. Lower is better.
double maxpro_score(const std::vector<std::pair<double, double>>& points,
                    std::pair<double, double> lambda_range,
                    std::pair<double, double> gamma_range);

/// One candidate Latin hypercube: a random permutation pairing of stratum
/// midpoints, drawn from `rng`. Exposed so the selection can be replayed.
std::vector<std::pair<double, double>> lhd_candidate(int n_runs,
                                                     std::pair<double, double> lambda_range,
                                                     std::pair<double, double> gamma_range,
                                                     Rng& rng);

/// Latin hypercube over (lambda, gamma): one point per axis stratum, placed
/// at stratum midpoints, chosen among `pool` random candidates by the
/// MaxPro criterion. Deterministic given the seed.
Design space_filling_design(int n_runs, std::pair<double, double> lambda_range,
                            std::pair<double, double> gamma_range, std::uint64_t seed,
                            int pool = 2000);

struct TuneResult {
    std::vector<DesignPoint> points;
    double recommended_lambda = 0.0;
    double recommended_gamma = 0.0;
    bool leaf_window_satisfied = true;
    std::vector<std::string> warnings;
};

/// Fits one ensemble per design point on an inner 80/20 split of the
/// training rows, then recommends the validation-RMSE minimizer whose
/// median leaf count lies in [4, 16] (the "keep trees simple" window).
/// With `refine`, a second design over the bounding box of the three best
/// points is evaluated too.
TuneResult tune(const SpatialDataset& ds, const SplitIndices& split, const FitConfig& base_cfg,
                const Design& design, bool refine = false, unsigned workers = 1);

/// Design diagnostics CSV:
/// lambda,gamma,q25,q50,q75,n_trees_effective,val_rmse.
void write_design_csv(const std::vector<DesignPoint>& points, const std::string& path);

}  // namespace boosts
