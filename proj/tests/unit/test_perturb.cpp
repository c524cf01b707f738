#include <doctest.h>

#include <set>

#include "recalx/error.hpp"
#include "recalx/perturb.hpp"

using namespace recalx;

TEST_CASE("perturbation replaces unobserved features with the baseline") {
    PerturbationSpec spec{{9.0, 8.0, 7.0}, std::nullopt};
    const Instance x{1.0, 2.0, 3.0};
    CHECK(apply_perturbation(x, SubsetMask::from_bits(0b101, 3), spec) == Instance{1.0, 8.0, 3.0});
    CHECK(apply_perturbation(x, SubsetMask::full(3), spec) == x);
    CHECK(apply_perturbation(x, SubsetMask::empty(3), spec) == spec.baseline);
    CHECK(perturbation_level(SubsetMask::from_bits(0b101, 3), spec) == doctest::Approx(1.0 / 3.0));
    CHECK_THROWS_AS(apply_perturbation(x, SubsetMask::full(2), spec), InvalidInput);
}

TEST_CASE("grouped perturbation and size-weighted level") {
    PerturbationSpec spec = PerturbationSpec::zeros(4);
    spec.groups.emplace(std::vector<std::vector<std::size_t>>{{0, 1, 2}, {3}}, 4);
    CHECK(spec.unit_count() == 2);
    const Instance x{1.0, 2.0, 3.0, 4.0};
    const auto m = SubsetMask::from_bits(0b10, 2);
    CHECK(apply_perturbation(x, m, spec) == Instance{0.0, 0.0, 0.0, 4.0});
    CHECK(perturbation_level(m, spec) == doctest::Approx(0.75));

    CHECK_THROWS_AS(FeatureGroups({{0, 1}, {1, 2}}, 3), InvalidInput);
    CHECK_THROWS_AS(FeatureGroups({{0, 1}}, 3), InvalidInput);
    CHECK_THROWS_AS(FeatureGroups({{0, 1}, {}}, 2), InvalidInput);

    const auto back = PerturbationSpec::from_json(spec.to_json());
    CHECK(back.unit_count() == 2);
    CHECK(back.groups->group(0) == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("bins are half-open with a closed last bin") {
    const PerturbationLevelBins bins(10);
    CHECK(bins.bin_of(0.0) == 1);
    CHECK(bins.bin_of(0.1) == 2);
    CHECK(bins.bin_of(0.0999) == 1);
    CHECK(bins.bin_of(0.9) == 10);
    CHECK(bins.bin_of(1.0) == 10);
    CHECK(bins.lower(3) == doctest::Approx(0.2));
    CHECK(bins.upper(3) == doctest::Approx(0.3));
    CHECK(bins.edges().size() == 11);
    CHECK_THROWS_AS(bins.bin_of(-0.01), InvalidInput);
    CHECK_THROWS_AS(bins.bin_of(1.01), InvalidInput);
    CHECK_THROWS_AS(PerturbationLevelBins(0), InvalidInput);
    // 3/10 must open bin 4 even though 3.0/10 and 0.3 print alike.
    CHECK(bins.bin_of(3.0 / 10.0) == 4);
}

TEST_CASE("feasible counts at d = 8, B = 10") {
    const PerturbationLevelBins bins(10);
    CHECK(feasible_perturbed_counts(1, bins, 8) == std::vector<std::size_t>{0});
    CHECK(feasible_perturbed_counts(5, bins, 8).empty());
    CHECK(feasible_perturbed_counts(10, bins, 8) == std::vector<std::size_t>{8});
    Rng rng(1);
    CHECK_THROWS_AS(sample_subset_in_bin(5, bins, 8, rng), InfeasibleBin);
    try {
        sample_subset_in_bin(5, bins, 8, rng);
    } catch (const InfeasibleBin& e) {
        CHECK(e.bin() == 5);
    }
}

TEST_CASE("bin sampling stays inside the bin and covers every feasible count") {
    for (std::size_t g : {3, 6, 8, 13, 25}) {
        for (std::size_t b_count : {1, 4, 10}) {
            const PerturbationLevelBins bins(b_count);
            Rng rng(g * 100 + b_count);
            for (std::size_t b = 1; b <= b_count; ++b) {
                const auto counts = feasible_perturbed_counts(b, bins, g);
                if (counts.empty()) {
                    continue;
                }
                std::set<std::size_t> seen;
                for (int i = 0; i < 400; ++i) {
                    const auto m = sample_subset_in_bin(b, bins, g, rng);
                    const std::size_t perturbed = g - m.observed_count();
                    REQUIRE(bins.bin_of(static_cast<double>(perturbed) / static_cast<double>(g)) == b);
                    seen.insert(perturbed);
                }
                CHECK(seen.size() == counts.size());
            }
        }
    }
}

TEST_CASE("subsets of a fixed count are drawn uniformly") {
    const PerturbationLevelBins bins(4);
    Rng rng(9);
    // g = 4, bin 3 = [0.5, 0.75) holds only m = 2: C(4,2) = 6 subsets.
    std::vector<int> counts(16, 0);
    for (int i = 0; i < 60000; ++i) {
        ++counts[sample_subset_in_bin(3, bins, 4, rng).to_bits()];
    }
    int distinct = 0;
    for (int c : counts) {
        if (c > 0) {
            ++distinct;
            CHECK(c == doctest::Approx(10000).epsilon(0.05));
        }
    }
    CHECK(distinct == 6);
}

TEST_CASE("grouped bin sampling uses the size-weighted level") {
    PerturbationSpec spec = PerturbationSpec::zeros(6);
    spec.groups.emplace(std::vector<std::vector<std::size_t>>{{0, 1, 2, 3}, {4}, {5}}, 6);
    const PerturbationLevelBins bins(3);
    Rng rng(2);
    for (std::size_t b = 1; b <= 3; ++b) {
        for (int i = 0; i < 100; ++i) {
            try {
                const auto m = sample_subset_in_bin(b, bins, spec, rng);
                CHECK(bins.bin_of(perturbation_level(m, spec)) == b);
            } catch (const InfeasibleBin&) {
            }
        }
    }
}

TEST_CASE("subset enumeration") {
    const auto all = enumerate_subsets(3);
    REQUIRE(all.size() == 8);
    for (std::uint64_t i = 0; i < 8; ++i) {
        CHECK(all[i].to_bits() == i);
    }
    CHECK_THROWS_AS(enumerate_subsets(kMaxEnumerationUnits + 1), LimitExceeded);

    Rng rng(4);
    int observed = 0;
    for (int i = 0; i < 1000; ++i) {
        observed += static_cast<int>(sample_uniform_subset(10, rng).observed_count());
    }
    CHECK(observed / 10000.0 == doctest::Approx(0.5).epsilon(0.05));
}
