#include <doctest.h>

#include <cmath>
#include <random>

#include "../oracles.hpp"
#include "recalx/error.hpp"
#include "recalx/explain.hpp"

using namespace recalx;

namespace {

std::vector<double> table_of(std::size_t g, const std::function<double(std::uint64_t)>& f) {
    std::vector<double> t(std::size_t{1} << g);
    for (std::uint64_t s = 0; s < t.size(); ++s) {
        t[s] = f(s);
    }
    return t;
}

}  // namespace

TEST_CASE("exact Shapley on simple games") {
    const std::size_t g = 5;
    const auto sym = shapley_exact(tabulated_value_function(
        table_of(g, [](std::uint64_t s) { return std::popcount(s) / 5.0; })));
    for (double v : sym.scores) {
        CHECK(v == doctest::Approx(0.2).epsilon(1e-12));
    }
    CHECK(sym.evaluations == 32);

    // Unit 2 never matters.
    const auto dummy = shapley_exact(tabulated_value_function(
        table_of(g, [](std::uint64_t s) { return std::sin(static_cast<double>(s & ~std::uint64_t{4})); })));
    CHECK(std::abs(dummy.scores[2]) < 1e-12);

    CHECK_THROWS_AS(shapley_exact(ValueFunction(kMaxExactShapleyUnits + 1, 0,
                                                [](std::span<const SubsetMask> m) {
                                                    return std::vector<double>(m.size(), 0.0);
                                                })),
                    LimitExceeded);
}

TEST_CASE("exact Shapley equals the permutation definition") {
    std::mt19937_64 gen(21);
    for (std::size_t g = 1; g <= 6; ++g) {
        for (int trial = 0; trial < 5; ++trial) {
            const auto t = oracle::random_table(g, gen);
            const auto phi = shapley_exact(tabulated_value_function(t)).scores;
            const auto ref = oracle::permutation_shapley(t, g);
            for (std::size_t i = 0; i < g; ++i) {
                CHECK(std::abs(phi[i] - ref[i]) <= 1e-12);
            }
        }
    }
}

TEST_CASE("Shapley axioms on random games") {
    std::mt19937_64 gen(7);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t g = 2 + trial % 7;
        auto t = oracle::random_table(g, gen);
        const std::size_t dummy = trial % g;
        const std::size_t twin_a = (dummy + 1) % g;
        const std::size_t twin_b = (dummy + 2) % g;
        // Make `dummy` irrelevant and, when g > 2, twins interchangeable.
        for (std::uint64_t s = 0; s < t.size(); ++s) {
            t[s] = t[s & ~(std::uint64_t{1} << dummy)];
        }
        if (g > 2) {
            for (std::uint64_t s = 0; s < t.size(); ++s) {
                const bool a = (s >> twin_a) & 1U;
                const bool b = (s >> twin_b) & 1U;
                if (a && !b) {
                    const std::uint64_t swapped = (s & ~(std::uint64_t{1} << twin_a)) | (std::uint64_t{1} << twin_b);
                    t[swapped] = t[s];
                }
            }
        }
        const auto phi = shapley_exact(tabulated_value_function(t)).scores;
        double total = 0.0;
        for (double v : phi) {
            total += v;
        }
        CHECK(std::abs(total - (t.back() - t.front())) <= 1e-9);
        CHECK(std::abs(phi[dummy]) <= 1e-9);
        if (g > 2) {
            CHECK(std::abs(phi[twin_a] - phi[twin_b]) <= 1e-9);
        }
    }
}

TEST_CASE("sampled Shapley") {
    // Explanation game of a random linear classifier on 8 features.
    std::mt19937_64 gen(99);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<std::vector<double>> w(3, std::vector<double>(8));
    for (auto& row : w) {
        for (double& x : row) {
            x = n(gen);
        }
    }
    Instance x(8);
    for (double& xi : x) {
        xi = n(gen);
    }
    const auto model = RecalibratedModel::neutral(std::make_shared<LinearSoftmaxModel>(w, std::vector<double>{}),
                                                  PerturbationSpec::zeros(8), 10);
    const auto v = model_value_function(model, x);
    const auto exact = shapley_exact(v);
    const auto s = shapley_sampled(v, 2000, 3);
    CHECK(s.evaluations == 2000 * 9);
    CHECK(s.std_errors.size() == 8);
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(std::abs(s.scores[i] - exact.scores[i]) <= 0.01);
    }
    const auto again = shapley_sampled(v, 2000, 3);
    CHECK(again.scores == s.scores);

    const auto one = shapley_sampled(v, 1, 4);
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(std::isfinite(one.scores[i]));
    }
    CHECK_THROWS_AS(shapley_sampled(v, 0, 1), InvalidInput);

    const auto sym = shapley_sampled(
        tabulated_value_function(table_of(4, [](std::uint64_t s) { return std::popcount(s) * std::popcount(s) / 16.0; })),
        2000, 5);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(std::abs(sym.scores[i] - 0.25) <= 3.0 * sym.std_errors[i] + 1e-12);
    }
}

TEST_CASE("sampled Shapley is unbiased across seeds") {
    std::mt19937_64 gen(5);
    const auto t = oracle::random_table(6, gen);
    const auto v = tabulated_value_function(t);
    const auto exact = shapley_exact(v).scores;
    std::vector<double> mean(6, 0.0);
    std::vector<double> var(6, 0.0);
    const int seeds = 50;
    for (int s = 0; s < seeds; ++s) {
        const auto est = shapley_sampled(v, 100, static_cast<std::uint64_t>(s));
        for (std::size_t i = 0; i < 6; ++i) {
            mean[i] += est.scores[i] / seeds;
            var[i] += est.std_errors[i] * est.std_errors[i];
        }
    }
    for (std::size_t i = 0; i < 6; ++i) {
        const double combined = std::sqrt(var[i]) / seeds;
        CHECK(std::abs(mean[i] - exact[i]) <= 3.0 * combined);
    }
}

TEST_CASE("LIME recovers additive games and zeroes constant ones") {
    const std::vector<double> w = {0.3, -0.2, 0.05, 0.0, 0.41};
    const auto additive = tabulated_value_function(table_of(5, [&](std::uint64_t s) {
        double v = 0.1;
        for (std::size_t i = 0; i < 5; ++i) {
            if ((s >> i) & 1U) {
                v += w[i];
            }
        }
        return v;
    }));
    LimeOptions opts;
    opts.enumerate_all = true;
    opts.ridge = 1e-8;
    const auto phi = lime_explain(additive, opts);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(std::abs(phi.scores[i] - w[i]) <= 1e-6);
    }

    const auto constant = tabulated_value_function(table_of(5, [](std::uint64_t) { return 0.7; }));
    LimeOptions sampled;
    sampled.samples = 300;
    sampled.seed = 2;
    for (double v : lime_explain(constant, sampled).scores) {
        CHECK(std::abs(v) <= 1e-9);
    }
    const auto a = lime_explain(additive, sampled);
    const auto b = lime_explain(additive, sampled);
    CHECK(a.scores == b.scores);
    sampled.seed = 4;
    const auto c = lime_explain(additive, sampled);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(std::abs(c.scores[i] - w[i]) <= 1e-3);
    }
    sampled.samples = 6;
    CHECK_THROWS_AS(lime_explain(additive, sampled), InvalidInput);
}

TEST_CASE("summary matrix reproduces exact Shapley") {
    const auto a1 = build_summary_matrix("shapley", 1);
    CHECK(a1.rows() == 1);
    CHECK(a1.cols() == 2);
    CHECK(a1.at(0, 0) == -1.0);
    CHECK(a1.at(0, 1) == 1.0);

    std::mt19937_64 gen(12);
    for (std::size_t g = 1; g <= 12; ++g) {
        const auto a = build_summary_matrix("shapley", g);
        const auto theta = oracle::random_table(g, gen);
        const auto phi = apply_summary(a, theta);
        const auto exact = shapley_exact(tabulated_value_function(theta)).scores;
        double total = 0.0;
        for (std::size_t i = 0; i < g; ++i) {
            CHECK(std::abs(phi[i] - exact[i]) <= 1e-10);
            total += phi[i];
        }
        CHECK(std::abs(total - (theta.back() - theta.front())) <= 1e-9);
    }
    CHECK_THROWS_AS(build_summary_matrix("shapley", 13), LimitExceeded);
    CHECK_THROWS_AS(build_summary_matrix("lime", 3), InvalidInput);
    CHECK_THROWS_AS(apply_summary(a1, std::vector<double>{1.0}), InvalidInput);
}

TEST_CASE("spearman alignment") {
    const std::vector<double> phi = {1.0, 3.0, 2.0};
    CHECK(spearman_alignment(phi, phi) == doctest::Approx(1.0));
    CHECK(spearman_alignment(phi, std::vector<double>{10.0, 30.0, 20.0}) == doctest::Approx(1.0));
    CHECK(spearman_alignment(phi, std::vector<double>{-1.0, -3.0, -2.0}) == doctest::Approx(-1.0));
    // Ties get average ranks: ref ranks [1, 2.5, 2.5] against phi ranks [1, 3, 2].
    CHECK(spearman_alignment(phi, std::vector<double>{0.0, 1.0, 1.0}) == doctest::Approx(1.5 / std::sqrt(3.0)));
    CHECK_THROWS_AS(spearman_alignment(phi, std::vector<double>{1.0, 1.0, 1.0}), UndefinedMetric);
    CHECK(spearman_alignment(std::vector<double>{1e-17, -2e-17, 0.5}, std::vector<double>{0.0, 0.0, 1.0}) ==
          doctest::Approx(1.0));
    CHECK_THROWS_AS(spearman_alignment(std::vector<double>{1.0}, std::vector<double>{1.0}), InvalidInput);
}

TEST_CASE("localization score") {
    const std::vector<double> phi = {2.0, -5.0, 1.0, 1.0};
    CHECK(localization_score(phi, SubsetMask::from_bits(0b0001, 4)) == doctest::Approx(0.5));
    CHECK(localization_score(phi, SubsetMask::from_bits(0b1101, 4)) == doctest::Approx(1.0));
    CHECK(localization_score(phi, SubsetMask::empty(4)) == 0.0);
    CHECK_THROWS_AS(localization_score(std::vector<double>{-1.0, 0.0}, SubsetMask::full(2)), UndefinedMetric);
    // Round-off residue is not positive mass.
    CHECK_THROWS_AS(localization_score(std::vector<double>{-0.3, 3e-17}, SubsetMask::from_bits(0b01, 2)),
                    UndefinedMetric);
    CHECK_THROWS_AS(localization_score(phi, SubsetMask::full(3)), InvalidInput);
}

TEST_CASE("model value function targets the predicted class") {
    auto base = std::make_shared<LinearSoftmaxModel>(std::vector<std::vector<double>>{{1.0, 0.0}, {0.0, 1.0}},
                                                     std::vector<double>{});
    const auto model = RecalibratedModel::neutral(base, PerturbationSpec::zeros(2), 4);
    const Instance x{0.2, 1.5};
    const auto v = model_value_function(model, x);
    CHECK(v.target_class() == 1);
    CHECK(v(SubsetMask::empty(2)) == doctest::Approx(0.5));
    CHECK(v(SubsetMask::full(2)) == doctest::Approx(softmax(std::vector<double>{0.2, 1.5})[1]));
    CHECK(model_value_function(model, x, 0).target_class() == 0);
    CHECK_THROWS_AS(model_value_function(model, x, 2), InvalidInput);

    const auto phi = shapley_exact(v);
    CHECK(phi.scores[0] + phi.scores[1] ==
          doctest::Approx(v(SubsetMask::full(2)) - v(SubsetMask::empty(2))).epsilon(1e-12));
    const auto j = phi.to_json();
    CHECK(j["method"] == "shapley-exact");
    CHECK(j["evals"] == 4);
    CHECK(phi.to_csv().rfind("unit_index,score\n", 0) == 0);
}
