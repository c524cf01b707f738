#include <doctest.h>

#include <cmath>

#include "../oracles.hpp"
#include "recalx/error.hpp"
#include "recalx/explain.hpp"
#include "recalx/theory.hpp"

using namespace recalx;

namespace {

ProblemDims dims(std::size_t d, std::size_t v, std::size_t k, std::size_t informative = 2) {
    ProblemDims out;
    out.features = d;
    out.cardinality = v;
    out.classes = k;
    out.informative = informative;
    return out;
}

}  // namespace

TEST_CASE("generated problems are valid distributions") {
    for (auto kind : {ProblemKind::random_table, ProblemKind::noisy_parity, ProblemKind::planted_informative}) {
        const auto p = generate_problem(kind, dims(4, 3, 3), 11);
        CHECK_NOTHROW(p.validate());
        CHECK(p.joint.size() == 81 * 3);
        for (double v : p.joint) {
            CHECK(v > 0.0);
        }
        const auto again = generate_problem(kind, dims(4, 3, 3), 11);
        CHECK(again.joint == p.joint);
        const auto back = SyntheticProblem::from_json(p.to_json());
        CHECK(back.joint == p.joint);
        CHECK(back.informative == p.informative);
        CHECK(parse_problem_kind(to_string(kind)) == kind);
    }
    CHECK_THROWS_AS(generate_problem(ProblemKind::random_table, dims(9, 2, 2), 1), LimitExceeded);
    CHECK_THROWS_AS(parse_problem_kind("nope"), InvalidInput);

    SyntheticProblem bad = generate_problem(ProblemKind::random_table, dims(2, 2, 2), 1);
    bad.joint[0] += 1e-6;
    CHECK_THROWS_AS(bad.validate(), InvalidInput);
}

TEST_CASE("support coding puts feature 0 first and uses values 1..V") {
    const auto p = generate_problem(ProblemKind::random_table, dims(3, 3, 2), 2);
    CHECK(p.point(0) == Instance{1.0, 1.0, 1.0});
    CHECK(p.point(1) == Instance{1.0, 1.0, 2.0});
    CHECK(p.point(9) == Instance{2.0, 1.0, 1.0});
    for (std::size_t c = 0; c < p.support_size(); ++c) {
        CHECK(p.code_of(p.point(c)) == c);
    }
    Rng rng(1);
    const auto data = p.sample_dataset(500, rng);
    CHECK(data.instances.size() == 500);
    for (const auto& x : data.instances) {
        for (double v : x) {
            CHECK((v >= 1.0 && v <= 3.0));
        }
    }
}

TEST_CASE("planted problems make non-informative features independent of the label") {
    const auto p = generate_problem(ProblemKind::planted_informative, dims(5, 3, 3, 2), 4);
    CHECK(p.informative.size() == 2);
    const auto py = p.label_marginal();
    for (std::size_t j = 0; j < 5; ++j) {
        if (std::find(p.informative.begin(), p.informative.end(), j) != p.informative.end()) {
            continue;
        }
        // P(x_j, y) = P(x_j) P(y) for every value and label.
        std::vector<double> joint(3 * 3, 0.0);
        std::vector<double> px(3, 0.0);
        for (std::size_t c = 0; c < p.support_size(); ++c) {
            const auto v = static_cast<std::size_t>(p.point(c)[j]) - 1;
            for (std::size_t y = 0; y < 3; ++y) {
                joint[v * 3 + y] += p.probability(c, static_cast<int>(y));
                px[v] += p.probability(c, static_cast<int>(y));
            }
        }
        for (std::size_t v = 0; v < 3; ++v) {
            for (std::size_t y = 0; y < 3; ++y) {
                CHECK(std::abs(joint[v * 3 + y] - px[v] * py[y]) <= 1e-12);
            }
        }
    }
}

TEST_CASE("decomposition terms match brute-force enumeration") {
    const auto p = generate_problem(ProblemKind::random_table, dims(4, 3, 3), 5);
    const auto spec = p.perturbation_spec();
    const auto table = random_table_model(p, 8);
    const auto pred = SubsetPredictor::from_model(*table);
    const auto rows = verify_decomposition(p, pred, spec);
    REQUIRE(rows.size() == 16);
    for (const auto& r : rows) {
        const auto ref = oracle::brute_force_terms(p, *table, r.mask.to_bits());
        CHECK(std::abs(r.v - ref.v) <= 1e-10);
        CHECK(std::abs(r.bias - ref.bias) <= 1e-10);
        CHECK(std::abs(r.mi - ref.mi) <= 1e-10);
        CHECK(std::abs(r.ce - ref.ce) <= 1e-10);
        CHECK(std::abs(r.residual) <= 1e-10);
        CHECK(r.ce >= -1e-12);
        CHECK(r.mi >= -1e-12);
    }
    CHECK(rows.front().v == 0.0);

    const auto csv = decomposition_to_csv(rows);
    CHECK(csv.rfind("mask,v,bias,mi,ce,residual\n0000,", 0) == 0);
}

TEST_CASE("decomposition with a recalibrated model uses per-bin temperatures") {
    const auto p = generate_problem(ProblemKind::random_table, dims(4, 2, 3), 6);
    const auto table = random_table_model(p, 2);
    auto profile = TemperatureProfile::neutral(4);
    profile.temperatures = {1.0, 0.5, 2.0, 4.0};
    const RecalibratedModel model(table, p.perturbation_spec(), profile);
    const auto rows = verify_decomposition(p, SubsetPredictor::from_recalibrated(model), p.perturbation_spec());
    for (const auto& r : rows) {
        const double level = 1.0 - static_cast<double>(r.mask.observed_count()) / 4.0;
        const auto ref = oracle::brute_force_terms(p, *table, r.mask.to_bits(), profile.temperature_for_level(level),
                                                   profile.temperature_for_level(1.0));
        CHECK(std::abs(r.v - ref.v) <= 1e-10);
        CHECK(std::abs(r.ce - ref.ce) <= 1e-10);
        CHECK(std::abs(r.residual) <= 1e-10);
    }
}

TEST_CASE("the Bayes model is calibrated and its value is mutual information") {
    const auto p = generate_problem(ProblemKind::planted_informative, dims(4, 3, 3, 2), 9);
    const BayesSubsetModel bayes(p);
    const auto rows = verify_decomposition(p, SubsetPredictor::from_model(bayes), p.perturbation_spec());
    for (const auto& r : rows) {
        CHECK(std::abs(r.ce) <= 1e-10);
        CHECK(std::abs(r.bias) <= 1e-10);
        CHECK(std::abs(r.v - r.mi) <= 1e-10);
    }
    CHECK(rows.back().v == doctest::Approx(oracle::mutual_information_xy(p)).epsilon(1e-10));

    // Adding only non-informative features adds nothing.
    std::uint64_t nonsignal = 0;
    for (std::size_t j = 0; j < 4; ++j) {
        if (std::find(p.informative.begin(), p.informative.end(), j) == p.informative.end()) {
            nonsignal |= std::uint64_t{1} << j;
        }
    }
    CHECK(std::abs(rows[nonsignal].mi) <= 1e-12);
}

TEST_CASE("a model that always predicts P_Y has every term zero") {
    const auto p = generate_problem(ProblemKind::random_table, dims(3, 2, 3), 3);
    const auto py = p.label_marginal();
    LogitVector z(3);
    for (std::size_t y = 0; y < 3; ++y) {
        z[y] = std::log(py[y]);
    }
    const TableModel prior(3, 3, {}, z);
    for (const auto& r : verify_decomposition(p, SubsetPredictor::from_model(prior), p.perturbation_spec())) {
        CHECK(std::abs(r.v) <= 1e-12);
        CHECK(std::abs(r.bias) <= 1e-12);
        CHECK(std::abs(r.mi) <= 1e-12);
        CHECK(std::abs(r.ce) <= 1e-12);
    }
}

TEST_CASE("the calibrated counterpart removes CE and keeps MI") {
    const auto p = generate_problem(ProblemKind::random_table, dims(4, 3, 2), 10);
    const auto spec = p.perturbation_spec();
    const auto table = random_table_model(p, 1);
    const auto pred = SubsetPredictor::from_model(*table);
    for (std::uint64_t bits : {0b0000ULL, 0b0101ULL, 0b1111ULL}) {
        const auto mask = SubsetMask::from_bits(bits, 4);
        const auto star = calibrated_counterpart(p, pred, spec, mask);
        const auto star_pred = SubsetPredictor::from_model(*star);
        CHECK(std::abs(exact_ce_kl(p, star_pred, spec, mask)) <= 1e-10);
        CHECK(exact_mutual_information(p, star_pred, spec, mask) ==
              doctest::Approx(exact_mutual_information(p, pred, spec, mask)).epsilon(1e-10));
    }
}

TEST_CASE("local bound report") {
    const auto p = generate_problem(ProblemKind::random_table, dims(3, 3, 3), 12);
    const auto table = random_table_model(p, 3);
    LocalBoundOptions opts;
    opts.trials = 20;
    opts.seed = 4;
    const auto report = verify_local_bound(p, SubsetPredictor::from_model(*table), p.perturbation_spec(), opts);
    CHECK(report.rhs == doctest::Approx(2.0 * report.ce_max + std::sqrt(8.0 * std::log(20.0))).epsilon(1e-12));
    CHECK(std::sqrt(8.0 * std::log(20.0)) == doctest::Approx(4.8956).epsilon(1e-4));
    CHECK(report.trials.size() == 20);
    CHECK(report.satisfied == 20);
    CHECK(report.fraction_satisfied() == 1.0);
    for (const auto& t : report.trials) {
        CHECK(t.lhs >= 0.0);
        CHECK(t.lhs <= report.worst_lhs);
    }
    const auto j = report.to_json();
    CHECK(j["probability_space"] == "x ~ P_X");
    CHECK(j["per_trial"].size() == 20);

    const auto again = verify_local_bound(p, SubsetPredictor::from_model(*table), p.perturbation_spec(), opts);
    CHECK(again.worst_lhs == report.worst_lhs);

    // A calibrated model matches its counterparts, so both sides of the gap vanish.
    const BayesSubsetModel bayes(p);
    const auto zero = verify_local_bound(p, SubsetPredictor::from_model(bayes), p.perturbation_spec(), opts);
    CHECK(zero.worst_lhs <= 1e-18);
    CHECK(zero.ce_max <= 1e-10);

    opts.delta = 1.0;
    CHECK_THROWS_AS(verify_local_bound(p, SubsetPredictor::from_model(*table), p.perturbation_spec(), opts),
                    InvalidInput);
}

TEST_CASE("exact bin CE") {
    const auto p = generate_problem(ProblemKind::planted_informative, dims(4, 3, 3, 2), 2);
    const auto bayes = std::make_shared<BayesSubsetModel>(p);
    const auto calibrated = RecalibratedModel::neutral(bayes, p.perturbation_spec(), 4);
    for (std::size_t b = 1; b <= 4; ++b) {
        CHECK(std::abs(exact_bin_ce(p, calibrated, b)) <= 1e-10);
    }
    const auto sharp = RecalibratedModel::neutral(std::make_shared<MiscalibrationWrapper>(bayes, 3.0),
                                                  p.perturbation_spec(), 4);
    // Bin 1 holds only the full subset, so it matches the decomposition CE.
    const auto rows = verify_decomposition(p, SubsetPredictor::from_recalibrated(sharp), p.perturbation_spec());
    CHECK(exact_bin_ce(p, sharp, 1) == doctest::Approx(rows.back().ce).epsilon(1e-10));
    CHECK(exact_bin_ce(p, sharp, 4) > 0.0);

    const auto ten = RecalibratedModel::neutral(bayes, p.perturbation_spec(), 10);
    CHECK(exact_bin_ce(p, ten, 2) == 0.0);  // infeasible at d = 4
}
