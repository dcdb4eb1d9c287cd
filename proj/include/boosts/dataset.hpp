#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "boosts/common.hpp"

namespace boosts {

/// Observations at n spatial locations: coordinates, covariates and the
/// response. Immutable once validated; safe to share across workers.
struct SpatialDataset {
    Eigen::MatrixXd locations;   // n x d, d in {1,2,3}
    Eigen::MatrixXd features;    // n x m
    Eigen::VectorXd response;    // n
    std::vector<std::string> feature_names;

    Eigen::Index n() const { return response.size(); }
    Eigen::Index dim() const { return locations.cols(); }
    Eigen::Index n_features() const { return features.cols(); }

    /// Checks row counts, finiteness and coordinate uniqueness; throws
    /// ValidationError describing the first violation.
    void validate() const;
};

struct SplitIndices {
    std::vector<int> train;
    std::vector<int> test;
    double fraction = 0.0;
    std::uint64_t seed = 0;

    std::string to_json() const;
    static SplitIndices from_json(const std::string& text);
};

/// Reads a UTF-8, comma-delimited CSV with one header row. Column sets must
/// be disjoint from each other and present in the header; all referenced
/// cells must parse as doubles.
SpatialDataset load_csv(const std::string& path,
                        const std::vector<std::string>& coord_cols,
                        const std::vector<std::string>& feature_cols,
                        const std::string& response_col);

/// Writes the dataset with 17 significant digits so load_csv(write_csv(ds))
/// round-trips every double exactly. Column names: coordinates as
/// s1..sd, then feature_names, then `response_col`.
void write_csv(const SpatialDataset& ds, const std::string& path,
               const std::string& response_col = "y");

/// Deterministic train/test split. |train| = round(fraction*n), half away
/// from zero, clamped so both sides keep at least one row. Index lists are
/// returned sorted ascending.
SplitIndices split(const SpatialDataset& ds, double fraction, std::uint64_t seed);

}  // namespace boosts
