#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "../oracles.hpp"
#include "recalx/core.hpp"
#include "recalx/error.hpp"
#include "recalx/io.hpp"
#include "recalx/random.hpp"

using namespace recalx;

TEST_CASE("subset mask bit conversions") {
    const auto m = SubsetMask::from_bits(0b1011, 5);
    CHECK(m.to_string() == "11010");
    CHECK(m.observed_count() == 3);
    CHECK(m.to_bits() == 0b1011);
    CHECK(m.complement().to_bits() == 0b10100);
    const std::size_t idx[] = {0, 1, 3};
    CHECK(SubsetMask::from_indices(5, idx) == m);
    CHECK_THROWS_AS(SubsetMask::from_bits(0b100000, 5), InvalidInput);
    CHECK(SubsetMask::full(3).to_string() == "111");
    CHECK(SubsetMask::empty(3).observed_count() == 0);
}

TEST_CASE("softmax matches the direct formula and is shift invariant") {
    std::mt19937_64 gen(11);
    std::normal_distribution<double> n(0.0, 3.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> z(1 + trial % 6);
        for (double& v : z) {
            v = n(gen);
        }
        const auto p = softmax(z);
        const auto q = oracle::naive_softmax(z);
        for (std::size_t i = 0; i < z.size(); ++i) {
            CHECK(p[i] == doctest::Approx(q[i]).epsilon(1e-12));
        }
        auto shifted = z;
        for (double& v : shifted) {
            v += 1000.0;
        }
        const auto ps = softmax(shifted);
        for (std::size_t i = 0; i < z.size(); ++i) {
            CHECK(ps[i] == doctest::Approx(p[i]).epsilon(1e-9));
        }
        CHECK_NOTHROW(validate_probabilities(p));
    }
    const std::vector<double> bad = {0.0, NAN};
    CHECK_THROWS_AS(softmax(bad), InvalidInput);
}

TEST_CASE("log_sum_exp handles large magnitudes") {
    const std::vector<double> v = {1000.0, 1000.0};
    CHECK(log_sum_exp(v) == doctest::Approx(1000.0 + std::log(2.0)));
}

TEST_CASE("argmax takes the lowest index on ties") {
    const std::vector<double> v = {1.0, 3.0, 3.0};
    CHECK(argmax(v) == 1);
}

TEST_CASE("kl divergence") {
    const std::vector<double> p = {0.5, 0.5, 0.0};
    const std::vector<double> q = {0.25, 0.25, 0.5};
    CHECK(kl_divergence(p, q) == doctest::Approx(std::log(2.0)));
    CHECK(kl_divergence(p, p) == 0.0);
    const std::vector<double> z = {1.0, 0.0, 0.0};
    const std::vector<double> w = {0.0, 1.0, 0.0};
    CHECK_THROWS_AS(kl_divergence(z, w), DivergenceUndefined);
}

TEST_CASE("validate_probabilities rejects bad vectors") {
    const std::vector<double> neg = {1.2, -0.2};
    const std::vector<double> sum = {0.4, 0.4};
    CHECK_THROWS_AS(validate_probabilities(neg), InvalidInput);
    CHECK_THROWS_AS(validate_probabilities(sum), InvalidInput);
}

TEST_CASE("group_vectors merges within tolerance and numbers groups by first appearance") {
    const std::vector<std::vector<double>> v = {{0.5, 0.5}, {0.2, 0.8}, {0.5 + 1e-13, 0.5}, {0.2, 0.8 + 1e-6}};
    const auto g = group_vectors(v, 1e-12);
    CHECK(g.group_count() == 3);
    CHECK(g.group_of == std::vector<std::size_t>{0, 1, 0, 2});
}

TEST_CASE("format_double round-trips") {
    std::mt19937_64 gen(3);
    std::uniform_real_distribution<double> u(-1e6, 1e6);
    for (int i = 0; i < 1000; ++i) {
        const double x = u(gen);
        CHECK(std::stod(format_double(x)) == x);
    }
    CHECK(format_double(0.1) == "0.1");
    CHECK(format_double(2.0) == "2");
}

TEST_CASE("seed derivation is deterministic and label sensitive") {
    const SeedSpec s(42);
    CHECK(s.child("a", 0).key() == SeedSpec(42).child("a", 0).key());
    CHECK(s.child("a", 0).key() != s.child("a", 1).key());
    CHECK(s.child("a", 0).key() != s.child("b", 0).key());
    CHECK(s.child("a", 0).child("b", 1).key() != s.child("b", 1).child("a", 0).key());

    Rng a = derive_rng(s, "x", 3);
    Rng b = derive_rng(s, "x", 3);
    for (int i = 0; i < 100; ++i) {
        CHECK(a() == b());
    }
}

TEST_CASE("rng distributions") {
    Rng rng(5);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 70000; ++i) {
        const auto k = rng.uniform_index(7);
        REQUIRE(k < 7);
        ++counts[k];
    }
    for (int c : counts) {
        CHECK(c == doctest::Approx(10000).epsilon(0.05));
    }
    CHECK_THROWS_AS(rng.uniform_index(0), InvalidInput);

    double sum = 0.0;
    double sq = 0.0;
    for (int i = 0; i < 50000; ++i) {
        const double g = rng.gamma(0.3);
        REQUIRE(g >= 0.0);
        sum += g;
        sq += g * g;
    }
    CHECK(sum / 50000 == doctest::Approx(0.3).epsilon(0.05));

    const auto d = dirichlet(rng, 5, 0.5);
    double total = 0.0;
    for (double v : d) {
        CHECK(v >= 0.0);
        total += v;
    }
    CHECK(total == doctest::Approx(1.0));

    const std::vector<double> w = {0.0, 3.0, 1.0};
    int ones = 0;
    for (int i = 0; i < 40000; ++i) {
        const auto k = rng.categorical(w);
        REQUIRE(k != 0);
        ones += k == 1;
    }
    CHECK(ones / 40000.0 == doctest::Approx(0.75).epsilon(0.02));
}

TEST_CASE("dataset csv round trip") {
    Dataset d;
    d.feature_count = 2;
    d.class_count = 3;
    d.instances = {{0.1, -2.5}, {3.0, 1e-7}};
    d.labels = {2, 0};
    const auto text = dataset_to_csv(d);
    CHECK(text.rfind("x0,x1,label\n", 0) == 0);
    const auto back = parse_dataset_csv(text, 3);
    CHECK(back.instances == d.instances);
    CHECK(back.labels == d.labels);
    CHECK(parse_dataset_csv(text).class_count == 3);
}

TEST_CASE("dataset csv errors carry row and column") {
    try {
        parse_dataset_csv("a,label\n1,0\nfoo,1\n");
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.row() == 3);
        CHECK(e.column() == 1);
        CHECK(std::string(e.what()).find("row 3, column 1") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_dataset_csv("a,b\n1,2\n"), ParseError);
    CHECK_THROWS_AS(parse_dataset_csv("a,label\n1,2,3\n"), ParseError);
    CHECK_THROWS_AS(parse_dataset_csv("a,label\n1,-1\n"), ParseError);
    CHECK_THROWS_AS(parse_dataset_csv("a,label\n1,5\n", 3), InvalidInput);
}

TEST_CASE("json files") {
    const auto dir = std::filesystem::temp_directory_path() / "recalx_core_test";
    write_text_file(dir / "ok.json", "{\"a\": 1}");
    CHECK(read_json_file(dir / "ok.json")["a"] == 1);
    write_text_file(dir / "bad.json", "{\"a\": ");
    CHECK_THROWS_AS(read_json_file(dir / "bad.json"), ParseError);
    CHECK_THROWS_AS(read_text_file(dir / "missing.json"), InvalidInput);
    std::filesystem::remove_all(dir);
}
