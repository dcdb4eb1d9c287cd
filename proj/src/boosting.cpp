#include "boosts/boosting.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>

#include <json.hpp>

#include "boosts/loss.hpp"

namespace boosts {

void FitConfig::validate() const {
    grow_config().validate();
    if (n_trees < 1) throw ValidationError("fit: n_trees must be >= 1");
    if (!(learning_rate > 0.0 && learning_rate <= 1.0)) {
        throw ValidationError("fit: learning_rate must lie in (0, 1]");
    }
    if (cov_update_every < 0) throw ValidationError("fit: cov_update_every must be >= 0");
    if (fgls_max_iter < 1) throw ValidationError("fit: fgls_max_iter must be >= 1");
    if (!(fgls_tol > 0.0)) throw ValidationError("fit: fgls_tol must be > 0");
    if (variogram_bins < 1) throw ValidationError("fit: variogram_bins must be >= 1");
    if (early_stop_patience < 0) throw ValidationError("fit: early_stop_patience must be >= 0");
    if (dense_cap < 0) throw ValidationError("fit: dense_cap must be >= 0");
    if (fixed_covariance) fixed_covariance->validate();
}

GrowConfig FitConfig::grow_config() const {
    GrowConfig g;
    g.lambda = lambda;
    g.gamma = gamma;
    g.max_leaves = max_leaves;
    g.min_leaf_size = min_leaf_size;
    g.system_form = system_form;
    g.workers = workers;
    return g;
}

namespace {

Tree null_tree(Eigen::Index n) {
    Tree t;
    t.nodes.emplace_back();  // single leaf, weight 0
    t.leaf_weights = Eigen::VectorXd::Zero(1);
    t.leaf_assignment.assign(static_cast<std::size_t>(n), 0);
    t.objective_value = 0.0;
    return t;
}

bool is_zero_output(const Tree& t) {
    return t.root_only() && t.nodes.front().weight == 0.0;
}

CovarianceParams estimate_covariance(const Eigen::VectorXd& residuals,
                                     const Eigen::MatrixXd& locations, const FitConfig& cfg) {
    if (cfg.detrend_fgls) {
        return fgls_estimate(residuals, locations, cfg.lwmlr, cfg.family, cfg.fgls_max_iter,
                             cfg.fgls_tol, cfg.variogram_bins)
            .params;
    }
    const auto emp = empirical_semivariogram(residuals, locations, cfg.variogram_bins);
    return fit_variogram(emp, cfg.family);
}

}  // namespace

Ensemble fit(const SpatialDataset& ds, const SplitIndices& split, const FitConfig& cfg) {
    cfg.validate();
    ds.validate();
    if (split.train.empty()) throw ValidationError("fit: empty training set");
    for (int i : split.train) {
        if (i < 0 || i >= ds.n()) throw ValidationError("fit: split index out of range");
    }

    const auto nt = static_cast<Eigen::Index>(split.train.size());
    Eigen::MatrixXd locs(nt, ds.dim());
    Eigen::MatrixXd X(nt, ds.n_features());
    Eigen::VectorXd y(nt);
    for (Eigen::Index i = 0; i < nt; ++i) {
        const int row = split.train[static_cast<std::size_t>(i)];
        locs.row(i) = ds.locations.row(row);
        X.row(i) = ds.features.row(row);
        y(i) = ds.response(row);
    }

    Ensemble ens;
    ens.config = cfg;
    ens.n_features = static_cast<int>(ds.n_features());

    Eigen::VectorXd r = y;
    CovarianceParams params;
    if (cfg.fixed_covariance) {
        params = *cfg.fixed_covariance;
    } else {
        params = estimate_covariance(r, locs, cfg);  // initialization failure aborts
    }
    ens.covariance_history.push_back(params);

    SpdFactor factor = build_covariance_factored(params, locs).second;
    auto hessian = std::make_shared<const HessianOperator>(factor, cfg.dense_cap);
    double loss_current = factor.quad_form(r);
    ens.objective_trace.push_back(loss_current);

    const GrowConfig grow_cfg = cfg.grow_config();
    int consecutive_null = 0;
    bool residuals_changed_since_fgls = false;

    for (int k = 1; k <= cfg.n_trees; ++k) {
        LossState state = compute_loss_state(r, hessian);
        Tree tree = grow_tree(state, X, grow_cfg);

        // A tree only joins the ensemble when its penalized reduced
        // objective beats contributing nothing; otherwise it degenerates to
        // a zero-output stump (the redundancy the regularization is for).
        if (tree.objective_value < 0.0) {
            Eigen::VectorXd f(nt);
            for (Eigen::Index i = 0; i < nt; ++i) {
                f(i) = tree.leaf_weights(tree.leaf_assignment[static_cast<std::size_t>(i)]);
            }
            if (cfg.learning_rate != 1.0) {
                f *= cfg.learning_rate;
                for (auto& node : tree.nodes) {
                    if (node.is_leaf()) node.weight *= cfg.learning_rate;
                }
                tree.leaf_weights *= cfg.learning_rate;
            }
            r -= f;
            residuals_changed_since_fgls = true;
            consecutive_null = 0;

            // Chain the trace by the contraction measured under the
            // covariance this tree was grown with; clamped ratio only
            // strips FP noise off a mathematically guaranteed <= 1.
            const double loss_after = factor.quad_form(r);
            const double ratio = loss_current > 0.0
                                     ? std::clamp(loss_after / loss_current, 0.0, 1.0)
                                     : 1.0;
            ens.objective_trace.push_back(ens.objective_trace.back() * ratio);
            loss_current = loss_after;
        } else {
            tree = null_tree(nt);
            ++consecutive_null;
            ens.objective_trace.push_back(ens.objective_trace.back());
        }
        ens.trees.push_back(std::move(tree));

        if (!cfg.fixed_covariance && cfg.cov_update_every > 0 && k % cfg.cov_update_every == 0 &&
            residuals_changed_since_fgls) {
            try {
                const CovarianceParams next = estimate_covariance(r, locs, cfg);
                if (!(next == params)) {
                    params = next;
                    factor = build_covariance_factored(params, locs).second;
                    hessian = std::make_shared<const HessianOperator>(factor, cfg.dense_cap);
                    loss_current = factor.quad_form(r);
                }
                residuals_changed_since_fgls = false;
            } catch (const NumericalError&) {
                ++ens.n_fgls_failures;  // freeze Sigma at the last good estimate
            }
        }
        ens.covariance_history.push_back(params);

        if (cfg.early_stop_patience > 0 && consecutive_null >= cfg.early_stop_patience) break;
    }
    return ens;
}

Eigen::VectorXd Ensemble::predict(const Eigen::MatrixXd& features) const {
    if (!trees.empty() && features.cols() != n_features) {
        throw ValidationError("predict: feature width " + std::to_string(features.cols()) +
                              " differs from training width " + std::to_string(n_features));
    }
    Eigen::VectorXd out = Eigen::VectorXd::Zero(features.rows());
    for (const auto& tree : trees) out += tree.predict(features);
    return out;
}

Eigen::VectorXd predict(const Ensemble& ens, const Eigen::MatrixXd& features) {
    return ens.predict(features);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

nlohmann::json lwmlr_to_json(const LwmlrConfig& cfg) {
    nlohmann::json j;
    j["components"] = cfg.components;
    j["basis"] = cfg.basis == LwmlrBasis::Constant ? "constant" : "linear";
    return j;
}

LwmlrConfig lwmlr_from_json(const nlohmann::json& j) {
    LwmlrConfig cfg;
    cfg.components = j.at("components").get<int>();
    const auto basis = j.at("basis").get<std::string>();
    if (basis == "constant") {
        cfg.basis = LwmlrBasis::Constant;
    } else if (basis == "linear") {
        cfg.basis = LwmlrBasis::Linear;
    } else {
        throw ValidationError("lwmlr basis must be constant|linear, got '" + basis + "'");
    }
    return cfg;
}

nlohmann::json config_to_json_obj(const FitConfig& cfg) {
    nlohmann::json j;
    j["lambda"] = cfg.lambda;
    j["gamma"] = cfg.gamma;
    j["trees"] = cfg.n_trees;
    j["max_leaves"] = cfg.max_leaves;
    j["min_leaf_size"] = cfg.min_leaf_size;
    j["system_form"] = to_string(cfg.system_form);
    j["learning_rate"] = cfg.learning_rate;
    j["family"] = to_string(cfg.family);
    j["lwmlr"] = lwmlr_to_json(cfg.lwmlr);
    j["cov_update_every"] = cfg.cov_update_every;
    j["detrend"] = cfg.detrend_fgls;
    j["fgls_max_iter"] = cfg.fgls_max_iter;
    j["fgls_tol"] = cfg.fgls_tol;
    j["variogram_bins"] = cfg.variogram_bins;
    j["early_stop_patience"] = cfg.early_stop_patience;
    j["dense_cap"] = cfg.dense_cap;
    j["seed"] = cfg.seed;
    if (cfg.fixed_covariance) {
        j["fixed_covariance"] = nlohmann::json::parse(cfg.fixed_covariance->to_json());
    } else {
        j["fixed_covariance"] = nullptr;
    }
    return j;
}

FitConfig config_from_json_obj(const nlohmann::json& j) {
    FitConfig cfg;
    cfg.lambda = j.at("lambda").get<double>();
    cfg.gamma = j.at("gamma").get<double>();
    cfg.n_trees = j.at("trees").get<int>();
    cfg.max_leaves = j.at("max_leaves").get<int>();
    cfg.min_leaf_size = j.at("min_leaf_size").get<int>();
    cfg.system_form = system_form_from_string(j.at("system_form").get<std::string>());
    cfg.learning_rate = j.at("learning_rate").get<double>();
    cfg.family = cov_family_from_string(j.at("family").get<std::string>());
    cfg.lwmlr = lwmlr_from_json(j.at("lwmlr"));
    cfg.cov_update_every = j.at("cov_update_every").get<int>();
    cfg.detrend_fgls = j.at("detrend").get<bool>();
    cfg.fgls_max_iter = j.at("fgls_max_iter").get<int>();
    cfg.fgls_tol = j.at("fgls_tol").get<double>();
    cfg.variogram_bins = j.at("variogram_bins").get<int>();
    cfg.early_stop_patience = j.at("early_stop_patience").get<int>();
    cfg.dense_cap = j.at("dense_cap").get<int>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("fixed_covariance") && !j.at("fixed_covariance").is_null()) {
        cfg.fixed_covariance = CovarianceParams::from_json(j.at("fixed_covariance").dump());
    }
    return cfg;
}

}  // namespace

std::string fit_config_to_json(const FitConfig& cfg) { return config_to_json_obj(cfg).dump(); }

FitConfig fit_config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError(std::string("fit config: malformed JSON: ") + e.what());
    }
    try {
        return config_from_json_obj(j);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("fit config: bad fields: ") + e.what());
    }
}

void save(const Ensemble& ens, const std::string& path) {
    nlohmann::json j;
    j["version"] = 1;
    j["n_features"] = ens.n_features;
    j["config"] = config_to_json_obj(ens.config);
    auto& hist = j["covariance_history"] = nlohmann::json::array();
    for (const auto& p : ens.covariance_history) hist.push_back(nlohmann::json::parse(p.to_json()));
    j["objective_trace"] = ens.objective_trace;
    auto& trees = j["trees"] = nlohmann::json::array();
    for (const auto& t : ens.trees) trees.push_back(nlohmann::json::parse(t.to_json()));

    std::ofstream out(path);
    if (!out) throw IoError("save: cannot open '" + path + "' for writing");
    out << j.dump(2) << "\n";
    if (!out) throw IoError("save: write failure on '" + path + "'");
}

Ensemble load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load: cannot open '" + path + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(buffer.str());
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("load: malformed model file '" + path + "': " + e.what());
    }

    Ensemble ens;
    try {
        const int version = j.at("version").get<int>();
        if (version != 1) {
            throw ValidationError("load: unsupported model version " + std::to_string(version) +
                                  " (this build reads version 1)");
        }
        ens.n_features = j.at("n_features").get<int>();
        ens.config = config_from_json_obj(j.at("config"));
        for (const auto& p : j.at("covariance_history")) {
            ens.covariance_history.push_back(CovarianceParams::from_json(p.dump()));
        }
        ens.objective_trace = j.at("objective_trace").get<std::vector<double>>();
        for (const auto& t : j.at("trees")) {
            ens.trees.push_back(Tree::from_json(t.dump()));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("load: bad model file '" + path + "': " + e.what());
    }
    if (ens.covariance_history.size() != ens.trees.size() + 1) {
        throw ValidationError("load: covariance_history must have one entry per tree plus one");
    }
    return ens;
}

}  // namespace boosts
