#include "boosts/tree.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include <json.hpp>

namespace boosts {

std::string to_string(SystemForm f) {
    return f == SystemForm::Consistent ? "consistent" : "paper_literal";
}

SystemForm system_form_from_string(const std::string& s) {
    if (s == "consistent") return SystemForm::Consistent;
    if (s == "paper_literal") return SystemForm::PaperLiteral;
    throw ValidationError("unknown system form '" + s + "' (expected consistent|paper_literal)");
}

void GrowConfig::validate() const {
    if (lambda < 0.0 || !std::isfinite(lambda)) throw ValidationError("grow: lambda must be >= 0");
    if (gamma < 0.0 || !std::isfinite(gamma)) throw ValidationError("grow: gamma must be >= 0");
    if (max_leaves < 1) throw ValidationError("grow: max_leaves must be >= 1");
    if (min_leaf_size < 1) throw ValidationError("grow: min_leaf_size must be >= 1");
}

int Tree::n_leaves() const {
    int t = 0;
    for (const auto& node : nodes) t += node.is_leaf() ? 1 : 0;
    return t;
}

double Tree::predict_row(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
    int node = 0;
    while (!nodes[static_cast<std::size_t>(node)].is_leaf()) {
        const auto& nd = nodes[static_cast<std::size_t>(node)];
        node = x(nd.feature) < nd.threshold ? nd.left : nd.right;
    }
    return nodes[static_cast<std::size_t>(node)].weight;
}

Eigen::VectorXd Tree::predict(const Eigen::MatrixXd& features) const {
    Eigen::VectorXd out(features.rows());
    for (Eigen::Index i = 0; i < features.rows(); ++i) out(i) = predict_row(features.row(i));
    return out;
}

namespace {

nlohmann::json node_to_json(const Tree& tree, int idx) {
    const auto& nd = tree.nodes[static_cast<std::size_t>(idx)];
    nlohmann::json j;
    if (nd.is_leaf()) {
        j["weight"] = nd.weight;
    } else {
        j["feature"] = nd.feature;
        j["threshold"] = nd.threshold;
        j["left"] = node_to_json(tree, nd.left);
        j["right"] = node_to_json(tree, nd.right);
    }
    return j;
}

int node_from_json(const nlohmann::json& j, Tree& tree) {
    const int idx = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    if (j.contains("weight")) {
        tree.nodes[static_cast<std::size_t>(idx)].weight = j.at("weight").get<double>();
        return idx;
    }
    if (!j.contains("feature") || !j.contains("threshold") || !j.contains("left") || !j.contains("right")) {
        throw ValidationError("tree JSON: node needs either weight or feature/threshold/left/right");
    }
    const int feature = j.at("feature").get<int>();
    const double threshold = j.at("threshold").get<double>();
    if (feature < 0) throw ValidationError("tree JSON: negative feature index");
    const int left = node_from_json(j.at("left"), tree);
    const int right = node_from_json(j.at("right"), tree);
    auto& nd = tree.nodes[static_cast<std::size_t>(idx)];
    nd.feature = feature;
    nd.threshold = threshold;
    nd.left = left;
    nd.right = right;
    return idx;
}

}  // namespace

std::string Tree::to_json() const {
    return node_to_json(*this, 0).dump();
}

Tree Tree::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError(std::string("tree JSON: parse failure: ") + e.what());
    }
    Tree tree;
    try {
        node_from_json(j, tree);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("tree JSON: bad node: ") + e.what());
    }
    return tree;
}

namespace {

// Solves the leaf-weight system for given block sums. Returns nullopt and
// the pivot through `smallest_pivot` instead of throwing so the split scan
// can skip singular candidates cheaply.
std::optional<Eigen::VectorXd> try_solve_system(const Eigen::MatrixXd& S, const Eigen::VectorXd& G,
                                                double lambda, SystemForm form,
                                                double* smallest_pivot = nullptr) {
    const auto T = S.rows();
    if (T == 1) {
        // scalar path keeps exact identities like w = mean residual under
        // identity covariance
        const double denom = form == SystemForm::Consistent ? S(0, 0) + lambda : lambda + S(0, 0);
        if (smallest_pivot) *smallest_pivot = denom;
        if (denom == 0.0 || !std::isfinite(denom)) return std::nullopt;
        Eigen::VectorXd w(1);
        w(0) = -G(0) / denom;
        if (!w.allFinite()) return std::nullopt;
        return w;
    }

    Eigen::MatrixXd M;
    if (form == SystemForm::Consistent) {
        M = S;
        M.diagonal().array() += lambda;
    } else {
        M.resize(T, T);
        for (Eigen::Index p = 0; p < T; ++p) {
            for (Eigen::Index q = 0; q < T; ++q) {
                M(p, q) = p == q ? lambda + S(p, q) : 0.5 * (lambda + S(p, q));
            }
        }
    }

    Eigen::LDLT<Eigen::MatrixXd> ldlt(M);
    const Eigen::VectorXd d = ldlt.vectorD();
    const double d_max = d.cwiseAbs().maxCoeff();
    const double d_min = d.cwiseAbs().minCoeff();
    if (smallest_pivot) *smallest_pivot = d_min;
    if (ldlt.info() != Eigen::Success || !(d_min > 1e-14 * std::max(d_max, 1e-300))) {
        return std::nullopt;
    }
    Eigen::VectorXd w = ldlt.solve(-G);
    if (!w.allFinite()) return std::nullopt;
    return w;
}

}  // namespace

Eigen::VectorXd solve_leaf_weights(const LeafBlocks& blocks, double lambda, SystemForm form) {
    if (blocks.n_leaves() < 1) throw ValidationError("solve_leaf_weights: empty blocks");
    double pivot = 0.0;
    auto w = try_solve_system(blocks.block_sums, blocks.grad_sums, lambda, form, &pivot);
    if (!w) {
        throw NumericalError("solve_leaf_weights: singular or indefinite system (smallest pivot " +
                             std::to_string(pivot) + ")");
    }
    return *w;
}

double objective(const LeafBlocks& blocks, const Eigen::VectorXd& w, double lambda, double gamma) {
    const int T = blocks.n_leaves();
    if (w.size() != T) throw ValidationError("objective: weight/leaf count mismatch");
    const double quad = w.dot(blocks.block_sums * w);
    return blocks.grad_sums.dot(w) + 0.5 * quad + gamma * T + 0.5 * lambda * w.squaredNorm();
}

std::vector<Split> enumerate_candidates(const Eigen::MatrixXd& features,
                                        const std::vector<int>& leaf, int min_leaf_size) {
    std::vector<Split> out;
    const int k = static_cast<int>(leaf.size());
    std::vector<double> values(leaf.size());
    for (Eigen::Index f = 0; f < features.cols(); ++f) {
        for (std::size_t i = 0; i < leaf.size(); ++i) values[i] = features(leaf[i], f);
        std::sort(values.begin(), values.end());
        int left_count = 1;
        for (std::size_t i = 1; i < values.size(); ++i, ++left_count) {
            if (values[i] == values[i - 1]) continue;
            if (left_count >= min_leaf_size && k - left_count >= min_leaf_size) {
                out.push_back({static_cast<int>(f), 0.5 * (values[i - 1] + values[i])});
            }
        }
    }
    return out;
}

namespace {

struct DenseHessianView {
    const Eigen::MatrixXd& h;
    const std::vector<int>& globals;
    double operator()(int a, int b) const { return h(globals[static_cast<std::size_t>(a)], globals[static_cast<std::size_t>(b)]); }
};

struct SubBlockView {
    const Eigen::MatrixXd& h;
    double operator()(int a, int b) const { return h(a, b); }
};

struct CandidateResult {
    double obj = std::numeric_limits<double>::infinity();
    int feature = -1;
    double threshold = 0.0;
    int leaf = -1;
    int skipped = 0;
    bool valid() const { return feature >= 0; }
};

bool better_candidate(const CandidateResult& a, const CandidateResult& b) {
    if (!a.valid()) return false;
    if (!b.valid()) return true;
    if (a.obj != b.obj) return a.obj < b.obj;
    if (a.feature != b.feature) return a.feature < b.feature;
    if (a.threshold != b.threshold) return a.threshold < b.threshold;
    return a.leaf < b.leaf;
}

// Scans every admissible threshold of one feature inside leaf p, maintaining
// running left-side sums so each boundary costs O(|leaf| + T) plus one
// (T+1)-dimensional solve.
template <typename HView>
void scan_feature(const LeafBlocks& blocks, const Eigen::VectorXd& gradient,
                  const Eigen::MatrixXd& features, int p, int f, const HView& h_at,
                  const GrowConfig& cfg, CandidateResult& best) {
    const auto& leaf = blocks.leaves[static_cast<std::size_t>(p)];
    const int k = static_cast<int>(leaf.size());
    const int T = blocks.n_leaves();

    std::vector<int> order(leaf.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double va = features(leaf[static_cast<std::size_t>(a)], f);
        const double vb = features(leaf[static_cast<std::size_t>(b)], f);
        if (va != vb) return va < vb;
        return leaf[static_cast<std::size_t>(a)] < leaf[static_cast<std::size_t>(b)];
    });

    Eigen::VectorXd a_run = Eigen::VectorXd::Zero(k);  // a(i) = sum_{j in L} h(i, j)
    Eigen::VectorXd s_left = Eigen::VectorXd::Zero(T);
    double g_left = 0.0;
    double s_ll = 0.0;

    Eigen::MatrixXd S_new(T + 1, T + 1);
    Eigen::VectorXd G_new(T + 1);

    for (int pos = 0; pos + 1 < k; ++pos) {
        const int t = order[static_cast<std::size_t>(pos)];
        const int gt = leaf[static_cast<std::size_t>(t)];
        g_left += gradient(gt);
        s_left += blocks.col_cache.row(gt).transpose();
        s_ll += 2.0 * a_run(t) + h_at(t, t);
        for (int i = 0; i < k; ++i) a_run(i) += h_at(i, t);

        const double v_cur = features(gt, f);
        const double v_next = features(leaf[static_cast<std::size_t>(order[static_cast<std::size_t>(pos + 1)])], f);
        if (v_cur == v_next) continue;
        const int left_count = pos + 1;
        if (left_count < cfg.min_leaf_size || k - left_count < cfg.min_leaf_size) continue;
        const double threshold = 0.5 * (v_cur + v_next);

        S_new.topLeftCorner(T, T) = blocks.block_sums;
        G_new.head(T) = blocks.grad_sums;
        for (int q = 0; q < T; ++q) {
            if (q == p) continue;
            S_new(p, q) = s_left(q);
            S_new(q, p) = s_left(q);
            const double s_right = blocks.block_sums(p, q) - s_left(q);
            S_new(T, q) = s_right;
            S_new(q, T) = s_right;
        }
        S_new(p, p) = s_ll;
        const double s_lr = s_left(p) - s_ll;
        S_new(T, p) = s_lr;
        S_new(p, T) = s_lr;
        S_new(T, T) = blocks.block_sums(p, p) - 2.0 * s_left(p) + s_ll;
        G_new(p) = g_left;
        G_new(T) = blocks.grad_sums(p) - g_left;

        auto w = try_solve_system(S_new, G_new, cfg.lambda, cfg.system_form);
        if (!w) {
            ++best.skipped;
            continue;
        }
        const double quad = w->dot(S_new * (*w));
        const double obj = G_new.dot(*w) + 0.5 * quad + cfg.gamma * (T + 1) +
                           0.5 * cfg.lambda * w->squaredNorm();
        CandidateResult cand;
        cand.obj = obj;
        cand.feature = f;
        cand.threshold = threshold;
        cand.leaf = p;
        cand.skipped = best.skipped;
        if (better_candidate(cand, best)) {
            const int keep = best.skipped;
            best = cand;
            best.skipped = keep;
        }
    }
}

}  // namespace

Tree grow_tree(const LossState& state, const Eigen::MatrixXd& features, const GrowConfig& cfg) {
    cfg.validate();
    const auto n = state.n();
    if (features.rows() != n) throw ValidationError("grow_tree: feature rows must match state size");

    Tree tree;
    tree.nodes.emplace_back();  // root leaf
    std::vector<int> leaf_node = {0};

    std::vector<int> all(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    LeafBlocks blocks = extract_blocks(state, {all});
    Eigen::VectorXd w = solve_leaf_weights(blocks, cfg.lambda, cfg.system_form);
    double obj = objective(blocks, w, cfg.lambda, cfg.gamma);

    const bool dense = state.hessian->is_dense();
    const int m = static_cast<int>(features.cols());

    while (blocks.n_leaves() < cfg.max_leaves) {
        const int T = blocks.n_leaves();
        std::vector<int> splittable;
        for (int p = 0; p < T; ++p) {
            if (static_cast<int>(blocks.leaves[static_cast<std::size_t>(p)].size()) >= 2 * cfg.min_leaf_size) {
                splittable.push_back(p);
            }
        }
        if (splittable.empty()) break;

        // one task per splittable leaf; results reduced in leaf order below
        std::vector<CandidateResult> results(splittable.size());
        parallel_for(splittable.size(), cfg.workers, [&](std::size_t u) {
            const int p = splittable[u];
            CandidateResult best;
            if (dense) {
                DenseHessianView view{state.hessian->dense(), blocks.leaves[static_cast<std::size_t>(p)]};
                for (int f = 0; f < m; ++f) scan_feature(blocks, state.gradient, features, p, f, view, cfg, best);
            } else {
                const Eigen::MatrixXd hsub = state.hessian->sub_block(blocks.leaves[static_cast<std::size_t>(p)]);
                SubBlockView view{hsub};
                for (int f = 0; f < m; ++f) scan_feature(blocks, state.gradient, features, p, f, view, cfg, best);
            }
            results[u] = best;
        });

        CandidateResult best;
        for (const auto& r : results) {
            tree.n_singular_skipped += r.skipped;
            if (better_candidate(r, best)) {
                const int keep = best.skipped;
                best = r;
                best.skipped = keep;
            }
        }
        if (!best.valid() || !(best.obj < obj)) break;

        std::vector<int> left;
        for (int i : blocks.leaves[static_cast<std::size_t>(best.leaf)]) {
            if (features(i, best.feature) < best.threshold) left.push_back(i);
        }
        LeafBlocks refined = split_blocks(state, blocks, best.leaf, left);
        Eigen::VectorXd w_new = solve_leaf_weights(refined, cfg.lambda, cfg.system_form);
        const double obj_new = objective(refined, w_new, cfg.lambda, cfg.gamma);
        if (!(obj_new < obj)) break;  // authoritative recomputation must agree

        const int left_node = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        const int right_node = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        auto& parent = tree.nodes[static_cast<std::size_t>(leaf_node[static_cast<std::size_t>(best.leaf)])];
        parent.feature = best.feature;
        parent.threshold = best.threshold;
        parent.left = left_node;
        parent.right = right_node;
        leaf_node[static_cast<std::size_t>(best.leaf)] = left_node;
        leaf_node.push_back(right_node);

        blocks = std::move(refined);
        w = std::move(w_new);
        obj = obj_new;
    }

    tree.leaf_weights = w;
    tree.objective_value = obj;
    for (int p = 0; p < blocks.n_leaves(); ++p) {
        tree.nodes[static_cast<std::size_t>(leaf_node[static_cast<std::size_t>(p)])].weight = w(p);
    }
    tree.leaf_assignment.assign(static_cast<std::size_t>(n), -1);
    for (int p = 0; p < blocks.n_leaves(); ++p) {
        for (int i : blocks.leaves[static_cast<std::size_t>(p)]) {
            tree.leaf_assignment[static_cast<std::size_t>(i)] = p;
        }
    }
    return tree;
}

}  // namespace boosts
