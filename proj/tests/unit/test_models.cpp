#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "recalx/error.hpp"
#include "recalx/io.hpp"
#include "recalx/models.hpp"

using namespace recalx;

namespace {

LinearSoftmaxModel small_linear() { return LinearSoftmaxModel({{1.0, -2.0}, {0.5, 0.0}, {0.0, 3.0}}, {0.1, 0.2, 0.3}); }

}  // namespace

TEST_CASE("linear model evaluates Wx + b") {
    const auto m = small_linear();
    CHECK(m.metadata().features == 2);
    CHECK(m.metadata().classes == 3);
    const auto z = m.eval_logits(Instance{2.0, 1.0});
    CHECK(z[0] == doctest::Approx(0.1));
    CHECK(z[1] == doctest::Approx(1.2));
    CHECK(z[2] == doctest::Approx(3.3));
}

TEST_CASE("linear model json round trip") {
    const auto m = small_linear();
    const auto back = LinearSoftmaxModel::from_json(m.to_json());
    CHECK(back.weights() == m.weights());
    CHECK(back.bias() == m.bias());
    CHECK_THROWS_AS(LinearSoftmaxModel::from_json(nlohmann::json{{"bias", {1.0}}}), ParseError);
    CHECK_THROWS_AS(LinearSoftmaxModel({{1.0, 2.0}, {1.0}}, {}), InvalidInput);
    CHECK_THROWS_AS(LinearSoftmaxModel({{1.0, 2.0}}, {}), InvalidInput);
    CHECK_THROWS_AS(LinearSoftmaxModel({{1.0, INFINITY}, {0.0, 0.0}}, {}), InvalidInput);

    const auto path = std::filesystem::temp_directory_path() / "recalx_model_test" / "w.json";
    write_text_file(path, m.to_json().dump());
    CHECK(load_linear_model(path)->weights() == m.weights());
    std::filesystem::remove_all(path.parent_path());
}

TEST_CASE("model contract checks inputs") {
    const auto m = small_linear();
    CHECK_THROWS_AS(m.eval_logits(Instance{1.0}), InvalidInput);
    CHECK_THROWS_AS(m.eval_logits(Instance{1.0, NAN}), InvalidInput);
    CHECK(m.eval_logits(std::span<const Instance>{}).empty());
}

TEST_CASE("table model looks up exact tuples and falls back to the default") {
    TableModel t(2, 2, {{{1.0, 2.0}, {3.0, -1.0}}, {{0.0, 0.0}, {0.5, 0.5}}});
    CHECK(t.eval_logits(Instance{1.0, 2.0}) == LogitVector{3.0, -1.0});
    CHECK(t.eval_logits(Instance{0.0, 0.0}) == LogitVector{0.5, 0.5});
    CHECK(t.eval_logits(Instance{2.0, 1.0}) == LogitVector{0.0, 0.0});
    CHECK(t.entry_count() == 2);
    CHECK_THROWS_AS(TableModel(1, 2, {{{1.0}, {0.0, 0.0}}, {{1.0}, {1.0, 1.0}}}), InvalidInput);

    const nlohmann::json j = {{"features", 1},
                              {"classes", 2},
                              {"entries", {{{"x", {1.0}}, {"logits", {1.0, 2.0}}}}},
                              {"default", {-1.0, -1.0}}};
    const auto loaded = TableModel::from_json(j);
    CHECK(loaded.eval_logits(Instance{1.0}) == LogitVector{1.0, 2.0});
    CHECK(loaded.eval_logits(Instance{5.0}) == LogitVector{-1.0, -1.0});
}

TEST_CASE("miscalibration wrapper scales logits") {
    auto inner = std::make_shared<LinearSoftmaxModel>(small_linear());
    MiscalibrationWrapper w(inner, 3.0, {0.0, 1.0, 0.0});
    const Instance x{2.0, 1.0};
    const auto z = inner->eval_logits(x);
    const auto zw = w.eval_logits(x);
    CHECK(zw[0] == doctest::Approx(3.0 * z[0]));
    CHECK(zw[1] == doctest::Approx(3.0 * z[1] + 1.0));
    CHECK_THROWS_AS(MiscalibrationWrapper(inner, 0.0), InvalidInput);
    CHECK_THROWS_AS(MiscalibrationWrapper(inner, 2.0, {1.0}), InvalidInput);
    CHECK_THROWS_AS(MiscalibrationWrapper(nullptr, 2.0), InvalidInput);
}
