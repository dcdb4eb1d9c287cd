#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "boosts/tree.hpp"
#include "test_util.hpp"

using namespace boosts;

namespace {

// ---------------------------------------------------------------------------
// Oracles. All of them work from the dense Hessian with plain index-set
// arithmetic and share no code with the block/scan machinery they check.
// ---------------------------------------------------------------------------

Eigen::VectorXd brute_grad_sums(const Eigen::VectorXd& g,
                                const std::vector<std::vector<int>>& leaves) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(leaves.size()));
    for (std::size_t p = 0; p < leaves.size(); ++p) {
        double s = 0.0;
        for (int i : leaves[p]) s += g(i);
        out(static_cast<Eigen::Index>(p)) = s;
    }
    return out;
}

Eigen::MatrixXd brute_block_sums(const Eigen::MatrixXd& h,
                                 const std::vector<std::vector<int>>& leaves) {
    const auto T = static_cast<Eigen::Index>(leaves.size());
    Eigen::MatrixXd out(T, T);
    for (Eigen::Index p = 0; p < T; ++p) {
        for (Eigen::Index q = 0; q < T; ++q) {
            double s = 0.0;
            for (int i : leaves[static_cast<std::size_t>(p)]) {
                for (int j : leaves[static_cast<std::size_t>(q)]) s += h(i, j);
            }
            out(p, q) = s;
        }
    }
    return out;
}

double oracle_objective(const Eigen::MatrixXd& S, const Eigen::VectorXd& G,
                        const Eigen::VectorXd& w, double lambda, double gamma) {
    return G.dot(w) + 0.5 * w.dot(S * w) + gamma * static_cast<double>(w.size()) +
           0.5 * lambda * w.squaredNorm();
}

// exact coordinate descent on the penalized quadratic; converges for SPD S
Eigen::VectorXd coordinate_descent(const Eigen::MatrixXd& S, const Eigen::VectorXd& G,
                                   double lambda, int sweeps = 20000) {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(G.size());
    for (int sweep = 0; sweep < sweeps; ++sweep) {
        for (Eigen::Index p = 0; p < w.size(); ++p) {
            double partial = G(p);
            for (Eigen::Index q = 0; q < w.size(); ++q) {
                if (q != p) partial += S(p, q) * w(q);
            }
            w(p) = -partial / (S(p, p) + lambda);
        }
    }
    return w;
}

// Full greedy tree growth recomputed from scratch at every candidate: no
// caching, no incremental sums. Mirrors the documented policy exactly
// (best-first, strict improvement, ties to lowest feature then threshold
// then leaf slot, left replaces the split slot and right is appended).
struct NaiveGrown {
    std::vector<std::vector<int>> leaves;
    Eigen::VectorXd weights;
    std::vector<std::pair<int, double>> splits;  // (feature, threshold) in accept order
    double objective = 0.0;
};

NaiveGrown naive_grow(const Eigen::VectorXd& g, const Eigen::MatrixXd& h,
                      const Eigen::MatrixXd& X, double lambda, double gamma, int min_leaf,
                      int max_leaves) {
    const int n = static_cast<int>(X.rows());
    NaiveGrown out;
    out.leaves.push_back({});
    for (int i = 0; i < n; ++i) out.leaves[0].push_back(i);

    auto solve = [&](const std::vector<std::vector<int>>& leaves) -> Eigen::VectorXd {
        Eigen::MatrixXd S = brute_block_sums(h, leaves);
        Eigen::VectorXd G = brute_grad_sums(g, leaves);
        Eigen::MatrixXd M = S;
        M.diagonal().array() += lambda;
        return Eigen::LDLT<Eigen::MatrixXd>(M).solve(-G);
    };
    auto score = [&](const std::vector<std::vector<int>>& leaves, const Eigen::VectorXd& w) {
        return oracle_objective(brute_block_sums(h, leaves), brute_grad_sums(g, leaves), w, lambda,
                                gamma);
    };

    out.weights = solve(out.leaves);
    out.objective = score(out.leaves, out.weights);

    while (static_cast<int>(out.leaves.size()) < max_leaves) {
        double best_obj = out.objective;
        int best_f = -1, best_p = -1;
        double best_thr = 0.0;
        bool found = false;

        for (std::size_t p = 0; p < out.leaves.size(); ++p) {
            const auto& leaf = out.leaves[p];
            if (static_cast<int>(leaf.size()) < 2 * min_leaf) continue;
            for (int f = 0; f < X.cols(); ++f) {
                std::vector<double> vals;
                for (int i : leaf) vals.push_back(X(i, f));
                std::sort(vals.begin(), vals.end());
                for (std::size_t v = 1; v < vals.size(); ++v) {
                    if (vals[v] == vals[v - 1]) continue;
                    const int lc = static_cast<int>(v);
                    if (lc < min_leaf || static_cast<int>(leaf.size()) - lc < min_leaf) continue;
                    const double thr = 0.5 * (vals[v - 1] + vals[v]);

                    std::vector<std::vector<int>> cand = out.leaves;
                    std::vector<int> left, right;
                    for (int i : leaf) (X(i, f) < thr ? left : right).push_back(i);
                    cand[p] = left;
                    cand.push_back(right);
                    const Eigen::VectorXd w = solve(cand);
                    if (!w.allFinite()) continue;
                    const double obj = score(cand, w);

                    bool better;
                    if (!found) {
                        better = true;
                    } else if (obj != best_obj) {
                        better = obj < best_obj;
                    } else if (f != best_f) {
                        better = f < best_f;
                    } else if (thr != best_thr) {
                        better = thr < best_thr;
                    } else {
                        better = static_cast<int>(p) < best_p;
                    }
                    if (obj < out.objective && better) {
                        best_obj = obj;
                        best_f = f;
                        best_thr = thr;
                        best_p = static_cast<int>(p);
                        found = true;
                    }
                }
            }
        }
        if (!found) break;

        std::vector<int> left, right;
        for (int i : out.leaves[static_cast<std::size_t>(best_p)]) {
            (X(i, best_f) < best_thr ? left : right).push_back(i);
        }
        out.leaves[static_cast<std::size_t>(best_p)] = left;
        out.leaves.push_back(right);
        out.weights = solve(out.leaves);
        out.objective = score(out.leaves, out.weights);
        out.splits.emplace_back(best_f, best_thr);
    }
    return out;
}

LossState make_state(Rng& rng, int n, const Eigen::MatrixXd* sigma_in = nullptr,
                     Eigen::VectorXd* r_out = nullptr) {
    const Eigen::MatrixXd sigma = sigma_in ? *sigma_in : testutil::random_spd(rng, n);
    const Eigen::VectorXd r = testutil::random_vector(rng, n, -2.0, 2.0);
    if (r_out) *r_out = r;
    return compute_loss_state(r, factorize(sigma));
}

}  // namespace

TEST_CASE("solve_leaf_weights identity-covariance mean") {
    Eigen::VectorXd r(2);
    r << 1.0, 3.0;
    const auto state = compute_loss_state(r, factorize(Eigen::MatrixXd::Identity(2, 2)));
    const auto blocks = extract_blocks(state, {{0, 1}});
    const auto w = solve_leaf_weights(blocks, 0.0, SystemForm::Consistent);
    CHECK(w(0) == 2.0);  // exactly the residual mean
}

TEST_CASE("solve_leaf_weights ridge limit") {
    Rng rng(59);
    const auto state = make_state(rng, 12);
    const auto blocks = extract_blocks(state, {{0, 1, 2, 3}, {4, 5, 6, 7}, {8, 9, 10, 11}});
    const double lambda = 1e9;
    const auto w = solve_leaf_weights(blocks, lambda, SystemForm::Consistent);
    CHECK(w.norm() <= 1e-7);
    for (int p = 0; p < 3; ++p) {
        CHECK(std::abs(w(p)) <= std::abs(blocks.grad_sums(p)) / lambda * (1.0 + 1e-6));
    }
}

TEST_CASE("solve_leaf_weights matches a generic numerical minimizer") {
    Rng rng(61);
    const int n = 20;
    const auto sigma = testutil::random_spd(rng, n);
    const auto state = compute_loss_state(testutil::random_vector(rng, n), factorize(sigma));
    const std::vector<std::vector<int>> partition = {{0, 1, 2, 3, 4, 5, 6},
                                                     {7, 8, 9, 10, 11, 12},
                                                     {13, 14, 15, 16, 17, 18, 19}};
    const auto blocks = extract_blocks(state, partition);
    const double lambda = 0.5;
    const auto w = solve_leaf_weights(blocks, lambda, SystemForm::Consistent);

    // oracle built from raw dense-H sums
    const auto S = brute_block_sums(state.hessian->dense(), partition);
    const auto G = brute_grad_sums(state.gradient, partition);
    const auto w_cd = coordinate_descent(S, G, lambda);
    CHECK((w - w_cd).cwiseAbs().maxCoeff() <= 1e-8);

    SUBCASE("no single-coordinate perturbation improves the objective") {
        const double base = objective(blocks, w, lambda, 0.7);
        for (int p = 0; p < 3; ++p) {
            for (double d : {1e-3, -1e-3}) {
                Eigen::VectorXd wp = w;
                wp(p) += d;
                CHECK(objective(blocks, wp, lambda, 0.7) >= base);
            }
        }
    }
}

TEST_CASE("paper-literal system form builds the printed matrix") {
    Rng rng(67);
    const auto state = make_state(rng, 10);
    const std::vector<std::vector<int>> partition = {{0, 1, 2, 3, 4}, {5, 6, 7, 8, 9}};
    const auto blocks = extract_blocks(state, partition);
    const double lambda = 0.3;

    const auto w = solve_leaf_weights(blocks, lambda, SystemForm::PaperLiteral);

    Eigen::MatrixXd xi(2, 2);
    const auto& S = blocks.block_sums;
    xi << lambda + S(0, 0), 0.5 * (lambda + S(0, 1)), 0.5 * (lambda + S(1, 0)), lambda + S(1, 1);
    const Eigen::VectorXd expected = xi.ldlt().solve(-blocks.grad_sums);
    CHECK((w - expected).cwiseAbs().maxCoeff() <= 1e-12);

    // the two forms coincide when lambda = 0 and T = 1, and differ otherwise
    const auto w_consistent = solve_leaf_weights(blocks, lambda, SystemForm::Consistent);
    CHECK((w - w_consistent).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("objective") {
    Rng rng(71);

    SUBCASE("zero weights leave only the leaf penalty") {
        const auto state = make_state(rng, 9);
        const auto blocks = extract_blocks(state, {{0, 1, 2}, {3, 4, 5}, {6, 7, 8}});
        CHECK(objective(blocks, Eigen::VectorXd::Zero(3), 0.4, 1.7) == doctest::Approx(3 * 1.7));
    }
    SUBCASE("worked identity example equals the exact loss drop") {
        Eigen::VectorXd r(2);
        r << 1.0, 3.0;
        const auto state = compute_loss_state(r, factorize(Eigen::MatrixXd::Identity(2, 2)));
        const auto blocks = extract_blocks(state, {{0, 1}});
        Eigen::VectorXd w(1);
        w << 2.0;
        const double obj = objective(blocks, w, 0.0, 0.0);
        CHECK(obj == doctest::Approx(-8.0));
        // direct check: loss goes 10 -> 2
        const Eigen::VectorXd r_new = r.array() - 2.0;
        CHECK(r_new.squaredNorm() - r.squaredNorm() == doctest::Approx(obj));
    }
    SUBCASE("splitting a zero-weight leaf in two costs exactly gamma") {
        const auto state = make_state(rng, 8);
        const auto coarse = extract_blocks(state, {{0, 1, 2, 3}, {4, 5, 6, 7}});
        const auto fine = extract_blocks(state, {{0, 1, 2, 3}, {4, 5}, {6, 7}});
        Eigen::VectorXd w2(2);
        w2 << 0.7, 0.0;
        Eigen::VectorXd w3(3);
        w3 << 0.7, 0.0, 0.0;  // predictions unchanged, one extra leaf
        const double gamma = 2.25;
        CHECK(objective(fine, w3, 0.1, gamma) ==
              doctest::Approx(objective(coarse, w2, 0.1, gamma) + gamma).epsilon(1e-10));
    }
}

TEST_CASE("enumerate_candidates") {
    SUBCASE("midpoints of distinct values") {
        Eigen::MatrixXd X(3, 1);
        X << 1.0, 2.0, 4.0;
        const auto cands = enumerate_candidates(X, {0, 1, 2}, 1);
        REQUIRE(cands.size() == 2);
        CHECK(cands[0].threshold == 1.5);
        CHECK(cands[1].threshold == 3.0);
    }
    SUBCASE("constant features yield nothing") {
        Eigen::MatrixXd X(4, 2);
        X << 1, 5, 1, 6, 1, 7, 1, 8;
        const auto cands = enumerate_candidates(X, {0, 1, 2, 3}, 1);
        for (const auto& c : cands) CHECK(c.feature == 1);
        CHECK(cands.size() == 3);
    }
    SUBCASE("count matches brute force with size limits") {
        Rng rng(73);
        const auto X = testutil::random_matrix(rng, 30, 3);
        std::vector<int> leaf;
        for (int i = 0; i < 30; i += 2) leaf.push_back(i);
        const int min_leaf = 3;
        const auto cands = enumerate_candidates(X, leaf, min_leaf);

        std::size_t expected = 0;
        for (int f = 0; f < 3; ++f) {
            std::vector<double> vals;
            for (int i : leaf) vals.push_back(X(i, f));
            std::sort(vals.begin(), vals.end());
            for (std::size_t v = 1; v < vals.size(); ++v) {
                if (vals[v] == vals[v - 1]) continue;
                const int lc = static_cast<int>(v);
                if (lc >= min_leaf && static_cast<int>(leaf.size()) - lc >= min_leaf) ++expected;
            }
        }
        CHECK(cands.size() == expected);
    }
}

TEST_CASE("grow_tree no-signal and over-regularized cases") {
    Rng rng(79);
    GrowConfig cfg;
    cfg.min_leaf_size = 2;
    cfg.gamma = 0.5;
    cfg.lambda = 0.0;

    SUBCASE("constant residuals give a root-only tree with the constant weight") {
        const int n = 16;
        const Eigen::VectorXd r = Eigen::VectorXd::Constant(n, 1.25);
        const auto state = compute_loss_state(r, factorize(Eigen::MatrixXd::Identity(n, n)));
        const auto X = testutil::random_matrix(rng, n, 2);
        const auto tree = grow_tree(state, X, cfg);
        CHECK(tree.root_only());
        CHECK(tree.nodes[0].weight == doctest::Approx(1.25).epsilon(1e-12));
    }
    SUBCASE("huge gamma blocks every split") {
        const auto state = make_state(rng, 20);
        const auto X = testutil::random_matrix(rng, 20, 2);
        GrowConfig heavy = cfg;
        heavy.gamma = 1e12;
        const auto tree = grow_tree(state, X, heavy);
        CHECK(tree.root_only());
    }
}

TEST_CASE("grow_tree equals the no-caching oracle") {
    Rng rng(83);
    for (int trial = 0; trial < 4; ++trial) {
        const int n = 12;
        const auto sigma = testutil::random_spd(rng, n);
        Eigen::VectorXd r;
        auto state = compute_loss_state(testutil::random_vector(rng, n, -2.0, 2.0), factorize(sigma));
        const auto X = testutil::random_matrix(rng, n, 2);

        GrowConfig cfg;
        cfg.lambda = 0.1;
        cfg.gamma = 0.05;
        cfg.min_leaf_size = 2;
        cfg.max_leaves = 6;
        const auto tree = grow_tree(state, X, cfg);

        const auto naive = naive_grow(state.gradient, state.hessian->dense(), X, cfg.lambda,
                                      cfg.gamma, cfg.min_leaf_size, cfg.max_leaves);
        CHECK(tree.n_leaves() == static_cast<int>(naive.leaves.size()));
        CHECK(tree.objective_value == doctest::Approx(naive.objective).epsilon(1e-9));

        // identical split set
        std::multiset<std::pair<int, double>> mine, theirs;
        for (const auto& nd : tree.nodes) {
            if (!nd.is_leaf()) mine.insert({nd.feature, nd.threshold});
        }
        for (const auto& s : naive.splits) theirs.insert(s);
        CHECK(mine == theirs);

        // identical per-sample weights
        for (int i = 0; i < n; ++i) {
            const double oracle_w = [&] {
                for (std::size_t p = 0; p < naive.leaves.size(); ++p) {
                    for (int j : naive.leaves[p]) {
                        if (j == i) return naive.weights(static_cast<Eigen::Index>(p));
                    }
                }
                return 0.0;
            }();
            CHECK(tree.predict_row(X.row(i)) == doctest::Approx(oracle_w).epsilon(1e-9));
        }
    }
}

TEST_CASE("scaled identity covariance reduces to classical boosting") {
    Rng rng(89);
    const int n = 60;
    const double sigma2 = 2.5;
    CovarianceParams p;
    p.nugget = sigma2;
    p.sill = 0.0;
    p.range = 1.0;
    const auto loc = testutil::random_locations(rng, n, 2);
    const auto sigma = build_covariance(p, loc);
    const auto r = testutil::random_vector(rng, n, -2.0, 2.0);
    const auto state = compute_loss_state(r, factorize(sigma));
    const auto X = testutil::random_matrix(rng, n, 3);

    GrowConfig cfg;
    cfg.lambda = 0.4;
    cfg.gamma = 0.2;
    cfg.min_leaf_size = 4;
    cfg.max_leaves = 8;
    const auto tree = grow_tree(state, X, cfg);
    CHECK(tree.n_leaves() > 1);

    // classical oracle: per-sample g_i = -2 r_i / sigma2, h_i = 2 / sigma2,
    // diagonal Hessian -> same greedy policy on scalar sums
    const Eigen::VectorXd g = -2.0 / sigma2 * r;
    const Eigen::MatrixXd h = (2.0 / sigma2) * Eigen::MatrixXd::Identity(n, n);
    const auto naive = naive_grow(g, h, X, cfg.lambda, cfg.gamma, cfg.min_leaf_size, cfg.max_leaves);

    CHECK(tree.n_leaves() == static_cast<int>(naive.leaves.size()));
    std::multiset<std::pair<int, double>> mine, theirs;
    for (const auto& nd : tree.nodes) {
        if (!nd.is_leaf()) mine.insert({nd.feature, nd.threshold});
    }
    for (const auto& s : naive.splits) theirs.insert(s);
    CHECK(mine == theirs);
    for (int i = 0; i < n; ++i) {
        double oracle_w = 0.0;
        for (std::size_t q = 0; q < naive.leaves.size(); ++q) {
            for (int j : naive.leaves[q]) {
                if (j == i) oracle_w = naive.weights(static_cast<Eigen::Index>(q));
            }
        }
        CHECK(std::abs(tree.predict_row(X.row(i)) - oracle_w) <= 1e-10);
    }
}

TEST_CASE("growing is invariant to training row order") {
    Rng rng(97);
    const int n = 40;
    const auto loc = testutil::random_locations(rng, n, 2);
    CovarianceParams p;
    p.nugget = 0.2;
    p.sill = 1.0;
    p.range = 3.0;
    const auto sigma = build_covariance(p, loc);
    const auto r = testutil::random_vector(rng, n, -2.0, 2.0);
    const auto X = testutil::random_matrix(rng, n, 2);

    GrowConfig cfg;
    cfg.lambda = 0.05;
    cfg.gamma = 0.1;
    cfg.min_leaf_size = 3;
    const auto base = grow_tree(compute_loss_state(r, factorize(sigma)), X, cfg);

    // permute rows
    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    Rng prng(123);
    prng.shuffle(perm);
    Eigen::MatrixXd loc_p(n, 2), X_p(n, 2);
    Eigen::VectorXd r_p(n);
    for (int i = 0; i < n; ++i) {
        loc_p.row(i) = loc.row(perm[static_cast<std::size_t>(i)]);
        X_p.row(i) = X.row(perm[static_cast<std::size_t>(i)]);
        r_p(i) = r(perm[static_cast<std::size_t>(i)]);
    }
    const auto permuted = grow_tree(compute_loss_state(r_p, factorize(build_covariance(p, loc_p))),
                                    X_p, cfg);

    CHECK(base.n_leaves() == permuted.n_leaves());
    Rng qrng(7);
    for (int t = 0; t < 50; ++t) {
        const Eigen::RowVectorXd x = testutil::random_matrix(qrng, 1, 2).row(0);
        CHECK(base.predict_row(x) == doctest::Approx(permuted.predict_row(x)).epsilon(1e-9));
    }
}

TEST_CASE("grow_tree parallel workers match the sequential result") {
    Rng rng(101);
    const int n = 50;
    const auto state = make_state(rng, n);
    const auto X = testutil::random_matrix(rng, n, 3);
    GrowConfig cfg;
    cfg.lambda = 0.1;
    cfg.gamma = 0.05;
    cfg.min_leaf_size = 3;
    const auto seq = grow_tree(state, X, cfg);
    GrowConfig par = cfg;
    par.workers = 4;
    const auto thr = grow_tree(state, X, par);
    CHECK(seq.n_leaves() == thr.n_leaves());
    CHECK(seq.leaf_weights == thr.leaf_weights);  // bitwise
    CHECK(seq.objective_value == thr.objective_value);
}

TEST_CASE("tree JSON round-trip preserves predictions") {
    Rng rng(103);
    const auto state = make_state(rng, 30);
    const auto X = testutil::random_matrix(rng, 30, 2);
    GrowConfig cfg;
    cfg.min_leaf_size = 3;
    cfg.gamma = 0.05;
    const auto tree = grow_tree(state, X, cfg);
    const auto back = Tree::from_json(tree.to_json());
    for (int i = 0; i < 30; ++i) {
        CHECK(tree.predict_row(X.row(i)) == back.predict_row(X.row(i)));
    }
    CHECK_THROWS_AS(Tree::from_json("{\"feature\":0}"), ValidationError);
    CHECK_THROWS_AS(Tree::from_json("not json"), IoError);
}
