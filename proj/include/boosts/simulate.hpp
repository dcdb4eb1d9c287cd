#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "boosts/covariance.hpp"
#include "boosts/dataset.hpp"

namespace boosts {

enum class Layout { Grid, UniformRandom };
enum class MeanFn { Zero, Linear, Friedman, Custom };
enum class FeatureGen { CoordinatesAsFeatures, IndependentUniform };

std::string to_string(Layout l);
Layout layout_from_string(const std::string& s);
std::string to_string(MeanFn m);
MeanFn mean_fn_from_string(const std::string& s);
std::string to_string(FeatureGen f);
FeatureGen feature_gen_from_string(const std::string& s);

/// Generative recipe for a synthetic spatial dataset: a known mean plus a
/// Gaussian random field drawn as L z with L the covariance factor.
struct SimSpec {
    int n = 100;
    int dim = 2;                 // d in {1,2,3}
    Layout layout = Layout::Grid;
    MeanFn mean_fn = MeanFn::Friedman;
    std::string mean_expression;  // used when mean_fn == Custom; variables x1..xm, s1..sd
    FeatureGen feature_gen = FeatureGen::IndependentUniform;
    int n_features = 5;           // ignored for CoordinatesAsFeatures
    CovarianceParams cov;
    std::uint64_t seed = 0;

    void validate() const;
};

struct SimResult {
    SpatialDataset dataset;
    Eigen::VectorXd mean;  // noiseless Z(x_s), the side output
};

/// Grid covers [0,10]^d with a near-square lattice (the smallest lattice
/// holding at least n points, trimmed to exactly n in row-major order; an
/// axis reduced to a single level sits at the midpoint 5). UniformRandom
/// draws i.i.d. uniforms on [0,10]^d and redraws on an exact duplicate.
Eigen::MatrixXd make_locations(Layout layout, int n, int dim, std::uint64_t seed);

/// y = mean + L z, deterministic given the seed. Features are either the
/// coordinates themselves or i.i.d. uniforms on [0,1]^m named x1..xm.
SimResult simulate(const SimSpec& spec);

/// Writes the generative truth (covariance, mean description, seed, layout)
/// as a JSON sidecar next to a simulated dataset.
std::string sim_truth_json(const SimSpec& spec);

/// Tiny arithmetic expression evaluator for custom means. Supports
/// + - * / ^, parentheses, unary minus, the functions sin cos tan exp log
/// sqrt abs tanh, constants pi and e, and the variables declared by `vars`.
class Expression {
public:
    Expression(const std::string& text, const std::vector<std::string>& vars);
    double eval(const std::vector<double>& values) const;

private:
    struct Op {
        int code;       // opcode
        double value;   // constant payload
        int var;        // variable index payload
    };
    std::vector<Op> program_;  // postfix
    std::size_t n_vars_;
};

}  // namespace boosts
