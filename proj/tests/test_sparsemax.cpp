#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "datn/grad_check.hpp"
#include "datn/graph.hpp"
#include "datn/sparsemax.hpp"
#include "test_util.hpp"

using namespace datn;

namespace {

// Brute-force Euclidean simplex projection, independent of the production
// sort-and-threshold path: alternate projection onto the sum-to-one plane
// with clipping of negative coordinates (Michelot-style active set), capped
// at max_iters sweeps.
std::vector<double> brute_force_project(const std::vector<double>& z, int max_iters = 10000) {
    std::vector<double> p = z;
    std::vector<char> active(z.size(), 1);
    for (int iter = 0; iter < max_iters; ++iter) {
        double sum = 0.0;
        std::size_t n_active = 0;
        for (std::size_t i = 0; i < p.size(); ++i)
            if (active[i]) {
                sum += p[i];
                ++n_active;
            }
        const double shift = (sum - 1.0) / double(n_active);
        bool clipped = false;
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (!active[i]) continue;
            p[i] -= shift;
            if (p[i] < 0.0) {
                p[i] = 0.0;
                active[i] = 0;
                clipped = true;
            }
        }
        if (!clipped) break;
    }
    return p;
}

// Second independent oracle: exhaustive support enumeration. For every
// nonempty support S the candidate is p_i = z_i - tau with
// tau = (sum_S z - 1)/|S|; keep the feasible candidate closest to z.
std::vector<double> enumerate_project(const std::vector<double>& z) {
    const std::size_t n = z.size();
    std::vector<double> best;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t mask = 1; mask < (std::size_t(1) << n); ++mask) {
        double sum = 0.0;
        std::size_t k = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (mask & (std::size_t(1) << i)) {
                sum += z[i];
                ++k;
            }
        const double tau = (sum - 1.0) / double(k);
        std::vector<double> cand(n, 0.0);
        bool feasible = true;
        for (std::size_t i = 0; i < n; ++i) {
            if (mask & (std::size_t(1) << i)) {
                cand[i] = z[i] - tau;
                if (cand[i] < -1e-12) feasible = false;
            }
        }
        if (!feasible) continue;
        double dist = 0.0;
        for (std::size_t i = 0; i < n; ++i) dist += (cand[i] - z[i]) * (cand[i] - z[i]);
        if (dist < best_dist) {
            best_dist = dist;
            best = cand;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("sparsemax of a constant vector is uniform") {
    for (double c : {-3.0, 0.0, 12.5}) {
        SparsemaxResult r = sparsemax(Tensor({3}, {c, c, c}));
        for (int i = 0; i < 3; ++i) REQUIRE(r.probs[i] == Catch::Approx(1.0 / 3.0).margin(1e-15));
    }
}

TEST_CASE("sparsemax saturates to a vertex when the gap is at least one") {
    SparsemaxResult r = sparsemax(Tensor({2}, {2.0, 0.0}));
    REQUIRE(r.probs[0] == 1.0);
    REQUIRE(r.probs[1] == 0.0);
    REQUIRE(r.support[0] == 1);
    REQUIRE(r.support[1] == 0);
}

TEST_CASE("sparsemax of (0.5, 0.1, -0.2) matches the projection oracle") {
    const std::vector<double> z = {0.5, 0.1, -0.2};
    const std::vector<double> oracle = brute_force_project(z);
    SparsemaxResult r = sparsemax(Tensor({3}, std::vector<double>(z)));
    REQUIRE(testutil::max_abs_diff(r.probs.data, oracle) <= 1e-6);
    REQUIRE(r.probs[0] == Catch::Approx(0.7).margin(1e-12));
    REQUIRE(r.probs[1] == Catch::Approx(0.3).margin(1e-12));
    REQUIRE(r.probs[2] == 0.0);
}

TEST_CASE("sparsemax rejects empty and non-finite input") {
    REQUIRE_THROWS(sparsemax(Tensor({0})));
    REQUIRE_THROWS(sparsemax(Tensor({2}, {1.0, std::nan("")})));
}

TEST_CASE("sparsemax agrees with brute-force projection on random inputs") {
    Rng rng(101);
    for (int trial = 0; trial < 1000; ++trial) {
        std::uniform_int_distribution<std::size_t> dims(2, 10);
        const std::size_t n = dims(rng);
        Tensor z = rand_normal(rng, {n});
        SparsemaxResult r = sparsemax(z);
        REQUIRE(testutil::max_abs_diff(r.probs.data, brute_force_project(z.data)) <= 1e-6);
        REQUIRE(testutil::max_abs_diff(r.probs.data, enumerate_project(z.data)) <= 1e-9);
    }
}

TEST_CASE("sparsemax output is a valid sparse distribution") {
    Rng rng(55);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor z = rand_normal(rng, {7}, 0.0, 2.0);
        SparsemaxResult r = sparsemax(z);
        double sum = 0.0;
        for (std::size_t i = 0; i < 7; ++i) {
            REQUIRE(r.probs[i] >= 0.0);
            REQUIRE((r.support[i] == 1) == (r.probs[i] > 0.0));
            sum += r.probs[i];
        }
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("sparsemax is exactly shift invariant") {
    Rng rng(77);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor z = rand_normal(rng, {6});
        std::uniform_real_distribution<double> cdist(-4.0, 4.0);
        const double c = cdist(rng);
        Tensor shifted = z;
        for (double& v : shifted.data) v += c;
        SparsemaxResult a = sparsemax(z);
        SparsemaxResult b = sparsemax(shifted);
        // exact: identical support and probabilities up to fp addition error
        REQUIRE(a.support == b.support);
        REQUIRE(testutil::max_abs_diff(a.probs, b.probs) <= 1e-12);
    }
}

TEST_CASE("sparsemax is idempotent on simplex points") {
    Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor p = rand_uniform(rng, {5}, 0.0, 1.0);
        double sum = std::accumulate(p.data.begin(), p.data.end(), 0.0);
        for (double& v : p.data) v /= sum;
        SparsemaxResult r = sparsemax(p);
        REQUIRE(testutil::max_abs_diff(r.probs, p) <= 1e-9);
    }
}

TEST_CASE("sparsemax preserves the ordering of its inputs") {
    Rng rng(13);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor z = rand_normal(rng, {6});
        SparsemaxResult r = sparsemax(z);
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t j = 0; j < 6; ++j)
                if (z[i] >= z[j]) REQUIRE(r.probs[i] >= r.probs[j] - 1e-12);
    }
}

TEST_CASE("sparsemax produces strict zeros on most gaussian inputs") {
    Rng rng(2024);
    int sparse_draws = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        SparsemaxResult r = sparsemax(rand_normal(rng, {20}));
        std::size_t support = 0;
        for (char s : r.support) support += s;
        if (support < 20) ++sparse_draws;
    }
    REQUIRE(sparse_draws >= 900);
}

TEST_CASE("sparsemax backward annihilates constants on full support") {
    Tensor z({4}, {0.1, 0.12, 0.11, 0.09});  // close scores: full support
    SparsemaxResult r = sparsemax(z);
    for (char s : r.support) REQUIRE(s == 1);
    Tensor grad = sparsemax_backward(Tensor({4}, {2.5, 2.5, 2.5, 2.5}), r);
    for (std::size_t i = 0; i < 4; ++i) REQUIRE(grad[i] == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("sparsemax backward is zero at a vertex") {
    SparsemaxResult r = sparsemax(Tensor({3}, {3.0, 0.0, -1.0}));
    REQUIRE(r.support[0] == 1);
    REQUIRE(r.support[1] == 0);
    Tensor grad = sparsemax_backward(Tensor({3}, {1.0, -2.0, 0.5}), r);
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(grad[i] == 0.0);
}

TEST_CASE("sparsemax backward matches finite differences off support boundaries") {
    Rng rng(404);
    const double h = 1e-4;
    int done = 0;
    while (done < 30) {
        Tensor z = rand_normal(rng, {6});
        SparsemaxResult r = sparsemax(z);
        // keep all coordinates well away from the support boundary
        double margin = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < 6; ++i) margin = std::min(margin, std::abs(z[i] - r.tau[0]));
        if (margin < 50 * h) continue;
        ++done;

        Tensor upstream = rand_normal(rng, {6});
        Tensor analytic = sparsemax_backward(upstream, r);
        for (std::size_t i = 0; i < 6; ++i) {
            Tensor zp = z, zm = z;
            zp[i] += h;
            zm[i] -= h;
            const Tensor pp = sparsemax(zp).probs, pm = sparsemax(zm).probs;
            double fd = 0.0;
            for (std::size_t j = 0; j < 6; ++j) fd += upstream[j] * (pp[j] - pm[j]) / (2 * h);
            REQUIRE(analytic[i] == Catch::Approx(fd).margin(1e-5));
        }
    }
}

TEST_CASE("sparsemax backward rejects mismatched shapes") {
    SparsemaxResult r = sparsemax(Tensor({3}, {0.3, 0.2, 0.1}));
    REQUIRE_THROWS(sparsemax_backward(Tensor({4}), r));
}

TEST_CASE("batched sparsemax treats mask-level constants as out of support") {
    // entries pushed to the mask constant never enter the support
    Tensor z({2, 3}, {0.5, 0.1, -1e9, 0.2, -1e9, -1e9});
    SparsemaxResult r = sparsemax(z);
    REQUIRE(r.probs.at(0, 2) == 0.0);
    REQUIRE(r.probs.at(1, 1) == 0.0);
    REQUIRE(r.probs.at(1, 2) == 0.0);
    REQUIRE(r.probs.at(1, 0) == 1.0);
    const double row0 = r.probs.at(0, 0) + r.probs.at(0, 1);
    REQUIRE(row0 == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("sparsemax graph op routes gradients through the support rule") {
    ParamStore store;
    ParamTensor& z = store.create("z", Tensor({1, 4}, {0.4, 0.1, -0.1, -2.0}));
    const Tensor weights({1, 4}, {1.0, -0.5, 0.3, 0.9});
    Rng rng(66);
    auto loss = [&](bool do_backward) {
        Graph g;
        Value out = mul(sparsemax_rows(g.param(z)), g.constant(weights));
        Value total = sum_all(out);
        if (do_backward) g.backward(total);
        return total.val()[0];
    };
    GradCheckOptions opt;
    opt.samples_per_tensor = 0;
    GradCheckReport rep = check_gradients(loss, store.all(), rng, opt);
    REQUIRE(rep.max_rel_err <= 1e-4);
}
