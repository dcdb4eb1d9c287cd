#include <doctest.h>

#include <cmath>
#include <vector>

#include "boosts/loss.hpp"
#include "test_util.hpp"

using namespace boosts;

namespace {

// loss as a function of predictions, evaluated through Eigen's generic
// dense inverse; the oracle path shares nothing with SpdFactor.
double direct_loss(const Eigen::VectorXd& y, const Eigen::VectorXd& yhat,
                   const Eigen::MatrixXd& sigma_inv) {
    const Eigen::VectorXd r = y - yhat;
    return r.dot(sigma_inv * r);
}

double brute_block_sum(const Eigen::MatrixXd& h, const std::vector<int>& rows,
                       const std::vector<int>& cols) {
    double s = 0.0;
    for (int i : rows) {
        for (int j : cols) s += h(i, j);
    }
    return s;
}

}  // namespace

TEST_CASE("loss state under the identity covariance") {
    Eigen::VectorXd r(2);
    r << 1.0, -2.0;
    const auto factor = factorize(Eigen::MatrixXd::Identity(2, 2));
    const auto state = compute_loss_state(r, factor);
    CHECK(state.gradient(0) == -2.0);
    CHECK(state.gradient(1) == 4.0);
    CHECK(state.loss_value == 5.0);
    CHECK((state.hessian->dense() - 2.0 * Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() == 0.0);

    SUBCASE("zero residual") {
        const auto zero = compute_loss_state(Eigen::VectorXd::Zero(2), factor);
        CHECK(zero.loss_value == 0.0);
        CHECK(zero.gradient.cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("dimension mismatch") {
        CHECK_THROWS_AS(compute_loss_state(Eigen::VectorXd::Zero(3), factor), ValidationError);
    }
}

TEST_CASE("gradient and Hessian match finite differences") {
    Rng rng(31);
    const int n = 15;
    const auto sigma = testutil::random_spd(rng, n);
    const Eigen::MatrixXd sigma_inv = sigma.inverse();
    const auto y = testutil::random_vector(rng, n);
    const auto yhat = testutil::random_vector(rng, n);

    const auto state = compute_loss_state(y - yhat, factorize(sigma));
    const double step = 1e-5;

    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd up = yhat, dn = yhat;
        up(i) += step;
        dn(i) -= step;
        const double fd = (direct_loss(y, up, sigma_inv) - direct_loss(y, dn, sigma_inv)) / (2 * step);
        CHECK(state.gradient(i) == doctest::Approx(fd).epsilon(1e-6));
    }

    const auto& h = state.hessian->dense();
    for (int i = 0; i < n; ++i) {
        for (int j = i; j < n; ++j) {
            Eigen::VectorXd pp = yhat, pm = yhat, mp = yhat, mm = yhat;
            pp(i) += step; pp(j) += step;
            pm(i) += step; pm(j) -= step;
            mp(i) -= step; mp(j) += step;
            mm(i) -= step; mm(j) -= step;
            const double fd = (direct_loss(y, pp, sigma_inv) - direct_loss(y, pm, sigma_inv) -
                               direct_loss(y, mp, sigma_inv) + direct_loss(y, mm, sigma_inv)) /
                              (4 * step * step);
            CHECK(h(i, j) == doctest::Approx(fd).epsilon(1e-4));
        }
    }

    SUBCASE("g = -H r holds identically") {
        CHECK((state.gradient + h * state.residual).cwiseAbs().maxCoeff() <=
              1e-10 * state.gradient.cwiseAbs().maxCoeff());
    }
}

TEST_CASE("extract_blocks picks the advertised rows and columns") {
    Rng rng(37);
    const int n = 7;
    const auto sigma = testutil::random_spd(rng, n);
    const auto r = testutil::random_vector(rng, n);
    const auto state = compute_loss_state(r, factorize(sigma));
    const auto& h = state.hessian->dense();

    // 1-based {1,2,6} and {3,4} from the worked example, plus the rest
    const std::vector<std::vector<int>> partition = {{0, 1, 5}, {2, 3}, {4, 6}};
    const auto blocks = extract_blocks(state, partition);

    CHECK(blocks.grad_sums(0) ==
          doctest::Approx(state.gradient(0) + state.gradient(1) + state.gradient(5)).epsilon(1e-15));
    CHECK(blocks.block_sums(0, 1) ==
          doctest::Approx(brute_block_sum(h, {0, 1, 5}, {2, 3})).epsilon(1e-12));

    SUBCASE("single leaf holds the whole-set sums") {
        const auto whole = extract_blocks(state, {{0, 1, 2, 3, 4, 5, 6}});
        CHECK(whole.grad_sums(0) == doctest::Approx(state.gradient.sum()).epsilon(1e-14));
        CHECK(whole.block_sums(0, 0) == doctest::Approx(h.sum()).epsilon(1e-12));
    }
    SUBCASE("partition errors") {
        CHECK_THROWS_AS(extract_blocks(state, {{0, 1}, {1, 2, 3, 4, 5, 6}}), ValidationError);
        CHECK_THROWS_AS(extract_blocks(state, {{0, 1, 2}}), ValidationError);
        CHECK_THROWS_AS(extract_blocks(state, {{0, 1, 2, 3, 4, 5, 6}, {}}), ValidationError);
    }
}

TEST_CASE("block sums match brute force on a random partition") {
    Rng rng(41);
    const int n = 12;
    const auto sigma = testutil::random_spd(rng, n);
    const auto state = compute_loss_state(testutil::random_vector(rng, n), factorize(sigma));
    const auto& h = state.hessian->dense();

    const std::vector<std::vector<int>> partition = {{3, 7, 0, 9}, {1, 2, 11}, {4, 5, 6, 8, 10}};
    const auto blocks = extract_blocks(state, partition);
    for (int p = 0; p < 3; ++p) {
        for (int q = 0; q < 3; ++q) {
            CHECK(blocks.block_sums(p, q) ==
                  doctest::Approx(brute_block_sum(h, blocks.leaves[p], blocks.leaves[q])).epsilon(1e-11));
        }
    }

    SUBCASE("totals are partition invariant") {
        const auto other = extract_blocks(state, {{0, 1, 2, 3, 4, 5}, {6, 7, 8, 9, 10, 11}});
        CHECK(blocks.block_sums.sum() == doctest::Approx(other.block_sums.sum()).epsilon(1e-11));
        CHECK(blocks.grad_sums.sum() == doctest::Approx(other.grad_sums.sum()).epsilon(1e-12));
    }
}

TEST_CASE("split_blocks") {
    Rng rng(43);
    const int n = 14;
    const auto sigma = testutil::random_spd(rng, n);
    const auto state = compute_loss_state(testutil::random_vector(rng, n), factorize(sigma));

    std::vector<std::vector<int>> partition = {{0, 1, 2, 3, 4, 5, 6}, {7, 8, 9, 10, 11, 12, 13}};
    const auto blocks = extract_blocks(state, partition);
    const std::vector<int> left = {0, 2, 5};

    const auto refined = split_blocks(state, blocks, 0, left);

    SUBCASE("equals a from-scratch extraction") {
        const auto direct = extract_blocks(state, {{0, 2, 5}, {7, 8, 9, 10, 11, 12, 13}, {1, 3, 4, 6}});
        CHECK((refined.grad_sums - direct.grad_sums).cwiseAbs().maxCoeff() <= 1e-12);
        CHECK((refined.block_sums - direct.block_sums).cwiseAbs().maxCoeff() <= 1e-10);
        CHECK((refined.col_cache - direct.col_cache).cwiseAbs().maxCoeff() <= 1e-10);
    }
    SUBCASE("merging back recovers the original") {
        const double g_merged = refined.grad_sums(0) + refined.grad_sums(2);
        CHECK(g_merged == doctest::Approx(blocks.grad_sums(0)).epsilon(1e-12));
        const double s_merged = refined.block_sums(0, 0) + 2.0 * refined.block_sums(0, 2) +
                                refined.block_sums(2, 2);
        CHECK(s_merged == doctest::Approx(blocks.block_sums(0, 0)).epsilon(1e-10));
        const double cross = refined.block_sums(0, 1) + refined.block_sums(2, 1);
        CHECK(cross == doctest::Approx(blocks.block_sums(0, 1)).epsilon(1e-10));
    }
    SUBCASE("singleton left") {
        const auto single = split_blocks(state, blocks, 1, {9});
        CHECK(single.grad_sums(1) == state.gradient(9));
        CHECK(single.block_sums(1, 1) ==
              doctest::Approx(state.hessian->dense()(9, 9)).epsilon(1e-12));
    }
    SUBCASE("argument errors") {
        CHECK_THROWS_AS(split_blocks(state, blocks, 0, {}), ValidationError);
        CHECK_THROWS_AS(split_blocks(state, blocks, 0, std::vector<int>{0, 1, 2, 3, 4, 5, 6}),
                        ValidationError);
        CHECK_THROWS_AS(split_blocks(state, blocks, 0, {7}), ValidationError);
    }
}

TEST_CASE("quadratic expansion is exact for this loss") {
    Rng rng(47);
    for (int trial = 0; trial < 10; ++trial) {
        const int n = 5 + static_cast<int>(rng.below(46));
        const auto sigma = testutil::random_spd(rng, n);
        const Eigen::MatrixXd sigma_inv = sigma.inverse();
        const auto y = testutil::random_vector(rng, n);
        const auto yhat = testutil::random_vector(rng, n);
        const auto f = testutil::random_vector(rng, n);

        const auto state = compute_loss_state(y - yhat, factorize(sigma));
        const double actual = direct_loss(y, yhat + f, sigma_inv) - direct_loss(y, yhat, sigma_inv);
        const double predicted =
            state.gradient.dot(f) + 0.5 * f.dot(state.hessian->dense() * f);
        CHECK(predicted == doctest::Approx(actual).epsilon(1e-9));
    }
}

TEST_CASE("factor-backed Hessian path matches the dense path") {
    Rng rng(53);
    const int n = 18;
    const auto sigma = testutil::random_spd(rng, n);
    const auto r = testutil::random_vector(rng, n);

    const auto dense_state = compute_loss_state(r, factorize(sigma), HessianOperator::kDefaultDenseCap);
    const auto factor_state = compute_loss_state(r, factorize(sigma), 0);  // force on-demand path
    CHECK(!factor_state.hessian->is_dense());

    CHECK((dense_state.gradient - factor_state.gradient).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(dense_state.loss_value == doctest::Approx(factor_state.loss_value).epsilon(1e-12));

    const std::vector<std::vector<int>> partition = {{0, 3, 6, 9, 12, 15}, {1, 4, 7, 10, 13, 16},
                                                     {2, 5, 8, 11, 14, 17}};
    const auto a = extract_blocks(dense_state, partition);
    const auto b = extract_blocks(factor_state, partition);
    CHECK((a.block_sums - b.block_sums).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK((a.col_cache - b.col_cache).cwiseAbs().maxCoeff() <= 1e-9);

    const auto sub_a = dense_state.hessian->sub_block(partition[1]);
    const auto sub_b = factor_state.hessian->sub_block(partition[1]);
    CHECK((sub_a - sub_b).cwiseAbs().maxCoeff() <= 1e-9);
}
