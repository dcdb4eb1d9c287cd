#include "boosts/simulate.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include <json.hpp>

namespace boosts {

std::string to_string(Layout l) { return l == Layout::Grid ? "grid" : "uniform_random"; }

Layout layout_from_string(const std::string& s) {
    if (s == "grid") return Layout::Grid;
    if (s == "uniform_random") return Layout::UniformRandom;
    throw ValidationError("unknown layout '" + s + "' (expected grid|uniform_random)");
}

std::string to_string(MeanFn m) {
    switch (m) {
        case MeanFn::Zero: return "zero";
        case MeanFn::Linear: return "linear";
        case MeanFn::Friedman: return "friedman";
        default: return "custom";
    }
}

MeanFn mean_fn_from_string(const std::string& s) {
    if (s == "zero") return MeanFn::Zero;
    if (s == "linear") return MeanFn::Linear;
    if (s == "friedman") return MeanFn::Friedman;
    if (s == "custom") return MeanFn::Custom;
    throw ValidationError("unknown mean function '" + s + "' (expected zero|linear|friedman|custom)");
}

std::string to_string(FeatureGen f) {
    return f == FeatureGen::CoordinatesAsFeatures ? "coordinates" : "independent_uniform";
}

FeatureGen feature_gen_from_string(const std::string& s) {
    if (s == "coordinates") return FeatureGen::CoordinatesAsFeatures;
    if (s == "independent_uniform") return FeatureGen::IndependentUniform;
    throw ValidationError("unknown feature generator '" + s + "' (expected coordinates|independent_uniform)");
}

void SimSpec::validate() const {
    if (n < 2) throw ValidationError("simulate: n must be >= 2");
    if (dim < 1 || dim > 3) throw ValidationError("simulate: dim must be 1, 2 or 3");
    if (feature_gen == FeatureGen::IndependentUniform && n_features < 1) {
        throw ValidationError("simulate: n_features must be >= 1");
    }
    if (mean_fn == MeanFn::Custom && mean_expression.empty()) {
        throw ValidationError("simulate: custom mean requires mean_expression");
    }
    cov.validate();
}

namespace {

std::vector<int> grid_axis_counts(int n, int dim) {
    std::vector<int> counts(static_cast<std::size_t>(dim), 1);
    if (dim == 1) {
        counts[0] = n;
    } else if (dim == 2) {
        counts[0] = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
        counts[1] = static_cast<int>(std::ceil(static_cast<double>(n) / counts[0]));
    } else {
        counts[0] = static_cast<int>(std::ceil(std::cbrt(static_cast<double>(n))));
        const int rem = static_cast<int>(std::ceil(static_cast<double>(n) / counts[0]));
        counts[1] = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(rem))));
        counts[2] = static_cast<int>(std::ceil(static_cast<double>(rem) / counts[1]));
    }
    return counts;
}

double grid_coord(int level, int count) {
    if (count <= 1) return 5.0;  // single level sits at the domain midpoint
    return 10.0 * static_cast<double>(level) / (count - 1);
}

}  // namespace

Eigen::MatrixXd make_locations(Layout layout, int n, int dim, std::uint64_t seed) {
    if (n < 1) throw ValidationError("make_locations: n must be >= 1");
    if (dim < 1 || dim > 3) throw ValidationError("make_locations: dim must be 1, 2 or 3");
    Eigen::MatrixXd loc(n, dim);

    if (layout == Layout::Grid) {
        const auto counts = grid_axis_counts(n, dim);
        int row = 0;
        if (dim == 1) {
            for (int i = 0; i < counts[0] && row < n; ++i) loc(row++, 0) = grid_coord(i, counts[0]);
        } else if (dim == 2) {
            for (int i = 0; i < counts[0] && row < n; ++i) {
                for (int j = 0; j < counts[1] && row < n; ++j) {
                    loc(row, 0) = grid_coord(i, counts[0]);
                    loc(row, 1) = grid_coord(j, counts[1]);
                    ++row;
                }
            }
        } else {
            for (int i = 0; i < counts[0] && row < n; ++i) {
                for (int j = 0; j < counts[1] && row < n; ++j) {
                    for (int k = 0; k < counts[2] && row < n; ++k) {
                        loc(row, 0) = grid_coord(i, counts[0]);
                        loc(row, 1) = grid_coord(j, counts[1]);
                        loc(row, 2) = grid_coord(k, counts[2]);
                        ++row;
                    }
                }
            }
        }
        return loc;
    }

    Rng rng(seed);
    std::set<std::vector<double>> seen;
    for (int i = 0; i < n; ++i) {
        std::vector<double> point(static_cast<std::size_t>(dim));
        do {
            for (int c = 0; c < dim; ++c) point[static_cast<std::size_t>(c)] = rng.uniform(0.0, 10.0);
        } while (!seen.insert(point).second);
        for (int c = 0; c < dim; ++c) loc(i, c) = point[static_cast<std::size_t>(c)];
    }
    return loc;
}

// ---------------------------------------------------------------------------
// Expression evaluator: recursive-descent parse to a postfix program.
// ---------------------------------------------------------------------------

namespace {

enum OpCode {
    kPushConst,
    kPushVar,
    kAdd,
    kSub,
    kMul,
    kDiv,
    kPow,
    kNeg,
    kSin,
    kCos,
    kTan,
    kExp,
    kLog,
    kSqrt,
    kAbs,
    kTanh
};

struct Parser {
    const std::string& text;
    std::size_t pos = 0;
    const std::vector<std::string>& vars;
    std::vector<Expression*>* unused = nullptr;
    std::vector<std::pair<int, double>> out;  // (opcode, payload); payload doubles as var index

    explicit Parser(const std::string& t, const std::vector<std::string>& v) : text(t), vars(v) {}

    void skip_ws() {
        while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    }

    bool eat(char c) {
        skip_ws();
        if (pos < text.size() && text[pos] == c) {
            ++pos;
            return true;
        }
        return false;
    }

    [[noreturn]] void fail(const std::string& what) {
        throw ValidationError("expression: " + what + " at position " + std::to_string(pos) +
                              " in '" + text + "'");
    }

    void expr() {  // term (('+'|'-') term)*
        term();
        for (;;) {
            if (eat('+')) {
                term();
                out.emplace_back(kAdd, 0.0);
            } else if (eat('-')) {
                term();
                out.emplace_back(kSub, 0.0);
            } else {
                return;
            }
        }
    }

    void term() {  // unary (('*'|'/') unary)*
        unary();
        for (;;) {
            if (eat('*')) {
                unary();
                out.emplace_back(kMul, 0.0);
            } else if (eat('/')) {
                unary();
                out.emplace_back(kDiv, 0.0);
            } else {
                return;
            }
        }
    }

    void unary() {
        if (eat('-')) {
            unary();
            out.emplace_back(kNeg, 0.0);
            return;
        }
        power();
    }

    void power() {  // primary ('^' unary)?  (right associative)
        primary();
        if (eat('^')) {
            unary();
            out.emplace_back(kPow, 0.0);
        }
    }

    void primary() {
        skip_ws();
        if (pos >= text.size()) fail("unexpected end of input");
        const char c = text[pos];
        if (c == '(') {
            ++pos;
            expr();
            if (!eat(')')) fail("expected ')'");
            return;
        }
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
            std::size_t used = 0;
            double v;
            try {
                v = std::stod(text.substr(pos), &used);
            } catch (...) {
                fail("bad number");
            }
            pos += used;
            out.emplace_back(kPushConst, v);
            return;
        }
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
            std::size_t end = pos;
            while (end < text.size() &&
                   (std::isalnum(static_cast<unsigned char>(text[end])) || text[end] == '_')) {
                ++end;
            }
            const std::string name = text.substr(pos, end - pos);
            pos = end;
            if (eat('(')) {
                expr();
                if (!eat(')')) fail("expected ')' after function argument");
                static const std::vector<std::pair<const char*, int>> fns = {
                    {"sin", kSin}, {"cos", kCos}, {"tan", kTan},   {"exp", kExp},
                    {"log", kLog}, {"sqrt", kSqrt}, {"abs", kAbs}, {"tanh", kTanh}};
                for (const auto& [fname, code] : fns) {
                    if (name == fname) {
                        out.emplace_back(code, 0.0);
                        return;
                    }
                }
                fail("unknown function '" + name + "'");
            }
            if (name == "pi") {
                out.emplace_back(kPushConst, 3.141592653589793238462643383279502884);
                return;
            }
            if (name == "e") {
                out.emplace_back(kPushConst, 2.718281828459045235360287471352662498);
                return;
            }
            for (std::size_t i = 0; i < vars.size(); ++i) {
                if (vars[i] == name) {
                    out.emplace_back(kPushVar, static_cast<double>(i));
                    return;
                }
            }
            fail("unknown identifier '" + name + "'");
        }
        fail(std::string("unexpected character '") + c + "'");
    }
};

}  // namespace

Expression::Expression(const std::string& text, const std::vector<std::string>& vars)
    : n_vars_(vars.size()) {
    Parser parser(text, vars);
    parser.expr();
    parser.skip_ws();
    if (parser.pos != text.size()) parser.fail("trailing input");
    program_.reserve(parser.out.size());
    for (const auto& [code, payload] : parser.out) {
        Op op;
        op.code = code;
        op.value = payload;
        op.var = code == kPushVar ? static_cast<int>(payload) : -1;
        program_.push_back(op);
    }
}

double Expression::eval(const std::vector<double>& values) const {
    if (values.size() != n_vars_) throw ValidationError("expression: wrong number of variable values");
    std::vector<double> stack;
    stack.reserve(16);
    auto pop = [&]() {
        const double v = stack.back();
        stack.pop_back();
        return v;
    };
    for (const auto& op : program_) {
        switch (op.code) {
            case kPushConst: stack.push_back(op.value); break;
            case kPushVar: stack.push_back(values[static_cast<std::size_t>(op.var)]); break;
            case kAdd: { const double b = pop(), a = pop(); stack.push_back(a + b); break; }
            case kSub: { const double b = pop(), a = pop(); stack.push_back(a - b); break; }
            case kMul: { const double b = pop(), a = pop(); stack.push_back(a * b); break; }
            case kDiv: { const double b = pop(), a = pop(); stack.push_back(a / b); break; }
            case kPow: { const double b = pop(), a = pop(); stack.push_back(std::pow(a, b)); break; }
            case kNeg: stack.back() = -stack.back(); break;
            case kSin: stack.back() = std::sin(stack.back()); break;
            case kCos: stack.back() = std::cos(stack.back()); break;
            case kTan: stack.back() = std::tan(stack.back()); break;
            case kExp: stack.back() = std::exp(stack.back()); break;
            case kLog: stack.back() = std::log(stack.back()); break;
            case kSqrt: stack.back() = std::sqrt(stack.back()); break;
            case kAbs: stack.back() = std::abs(stack.back()); break;
            case kTanh: stack.back() = std::tanh(stack.back()); break;
            default: throw NumericalError("expression: corrupt program");
        }
    }
    return stack.size() == 1 ? stack.back()
                             : throw NumericalError("expression: corrupt evaluation stack");
}

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

// Friedman-style nonlinear testbed, truncated to the available features:
// 10 sin(pi x1 x2) + 20 (x3 - 0.5)^2 + 10 x4 + 5 x5.
double friedman_mean(const Eigen::RowVectorXd& x) {
    double z = 0.0;
    const auto m = x.size();
    if (m >= 2) z += 10.0 * std::sin(kPi * x(0) * x(1));
    if (m >= 3) z += 20.0 * (x(2) - 0.5) * (x(2) - 0.5);
    if (m >= 4) z += 10.0 * x(3);
    if (m >= 5) z += 5.0 * x(4);
    return z;
}

// Fixed documented coefficients: intercept 1, slope on x_j is 1 + j/2.
double linear_mean(const Eigen::RowVectorXd& x) {
    double z = 1.0;
    for (Eigen::Index j = 0; j < x.size(); ++j) z += (1.0 + 0.5 * static_cast<double>(j)) * x(j);
    return z;
}

}  // namespace

SimResult simulate(const SimSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);

    SimResult result;
    auto& ds = result.dataset;
    ds.locations = make_locations(spec.layout, spec.n, spec.dim, spec.seed);
    if (spec.layout == Layout::UniformRandom) {
        // keep feature/noise draws independent of how many rejections the
        // location sampler needed
        rng = Rng(spec.seed + 0x9e3779b97f4a7c15ULL);
    }

    int m = spec.n_features;
    if (spec.feature_gen == FeatureGen::CoordinatesAsFeatures) {
        ds.features = ds.locations;
        m = spec.dim;
    } else {
        ds.features.resize(spec.n, m);
        for (int i = 0; i < spec.n; ++i) {
            for (int j = 0; j < m; ++j) ds.features(i, j) = rng.uniform();
        }
    }
    ds.feature_names.clear();
    for (int j = 0; j < m; ++j) ds.feature_names.push_back("x" + std::to_string(j + 1));

    result.mean.resize(spec.n);
    if (spec.mean_fn == MeanFn::Custom) {
        std::vector<std::string> vars = ds.feature_names;
        for (int c = 0; c < spec.dim; ++c) vars.push_back("s" + std::to_string(c + 1));
        Expression expr(spec.mean_expression, vars);
        std::vector<double> values(vars.size());
        for (int i = 0; i < spec.n; ++i) {
            for (int j = 0; j < m; ++j) values[static_cast<std::size_t>(j)] = ds.features(i, j);
            for (int c = 0; c < spec.dim; ++c) {
                values[static_cast<std::size_t>(m + c)] = ds.locations(i, c);
            }
            result.mean(i) = expr.eval(values);
        }
    } else {
        for (int i = 0; i < spec.n; ++i) {
            switch (spec.mean_fn) {
                case MeanFn::Zero: result.mean(i) = 0.0; break;
                case MeanFn::Linear: result.mean(i) = linear_mean(ds.features.row(i)); break;
                default: result.mean(i) = friedman_mean(ds.features.row(i)); break;
            }
        }
    }

    auto [sigma, factor] = build_covariance_factored(spec.cov, ds.locations);
    (void)sigma;
    Eigen::VectorXd z(spec.n);
    for (int i = 0; i < spec.n; ++i) z(i) = rng.normal();
    const Eigen::VectorXd noise = factor.matrix_l() * z;

    ds.response = result.mean + noise;
    ds.validate();
    return result;
}

std::string sim_truth_json(const SimSpec& spec) {
    nlohmann::json j;
    j["n"] = spec.n;
    j["dim"] = spec.dim;
    j["layout"] = to_string(spec.layout);
    j["mean_fn"] = to_string(spec.mean_fn);
    if (spec.mean_fn == MeanFn::Custom) j["mean_expression"] = spec.mean_expression;
    j["feature_gen"] = to_string(spec.feature_gen);
    j["n_features"] = spec.feature_gen == FeatureGen::CoordinatesAsFeatures ? spec.dim : spec.n_features;
    j["covariance"] = nlohmann::json::parse(spec.cov.to_json());
    j["seed"] = spec.seed;
    return j.dump(2);
}

}  // namespace boosts
