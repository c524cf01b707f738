#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "recalx/calibrate.hpp"
#include "recalx/core.hpp"

namespace recalx {

/// v(S): a deterministic set function over g units, usually the probability of
/// one target class under π(x, S).
class ValueFunction {
public:
    using BatchFn = std::function<std::vector<double>(std::span<const SubsetMask>)>;

    ValueFunction(std::size_t unit_count, int target_class, BatchFn batch);

    std::size_t unit_count() const noexcept { return units_; }
    int target_class() const noexcept { return target_; }

    double operator()(const SubsetMask& subset) const;
    /// One value per mask, in order. Throws NumericError on a non-finite value.
    std::vector<double> evaluate(std::span<const SubsetMask> subsets) const;

private:
    std::size_t units_;
    int target_;
    BatchFn batch_;
};

/// v(S) = P(target | π(x, S)) under the model's temperature for λ(S). Without a
/// target, the base model's argmax on the unperturbed x is used.
ValueFunction model_value_function(const RecalibratedModel& model, const Instance& x,
                                   std::optional<int> target_class = std::nullopt);

/// v looked up from a table indexed by the binary-counter subset code.
ValueFunction tabulated_value_function(std::vector<double> table, int target_class = 0);

struct Attribution {
    std::vector<double> scores;
    /// Monte-Carlo standard errors; empty for deterministic methods.
    std::vector<double> std_errors;
    std::string method;
    int target_class = 0;
    std::size_t evaluations = 0;
    std::uint64_t seed = 0;

    /// {"method","target_class","scores","evals","seed"} plus "std_errors" when present.
    nlohmann::json to_json() const;
    /// Header `unit_index,score`.
    std::string to_csv() const;
};

inline constexpr std::size_t kMaxExactShapleyUnits = 20;

/// Every v(S) is evaluated once; φ_i sums weighted marginal contributions.
Attribution shapley_exact(const ValueFunction& v);

/// Mean marginal contribution over uniformly random orderings (g + 1 evaluations
/// each). With a single permutation the standard errors are reported as 0.
Attribution shapley_sampled(const ValueFunction& v, std::size_t permutations, std::uint64_t seed);

struct LimeOptions {
    std::size_t samples = 1000;
    double kernel_width = 0.25;
    double ridge = 1e-6;
    std::uint64_t seed = 0;
    /// Use all 2^g masks once each instead of random draws (`samples` ignored).
    bool enumerate_all = false;
};

inline constexpr std::size_t kMaxLimeEnumerationUnits = 16;

/// Weighted ridge regression of v(S) on the mask bits with an unpenalized intercept.
Attribution lime_explain(const ValueFunction& v, const LimeOptions& options = {});

inline constexpr std::size_t kMaxSummaryUnits = 12;

/// Dense g × 2^g matrix with φ = A·ϑ for Shapley values; columns follow the
/// binary-counter subset order.
class SummaryMatrix {
public:
    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    double at(std::size_t row, std::size_t col) const { return values_.at(row * cols_ + col); }

    friend SummaryMatrix build_summary_matrix(const std::string& method, std::size_t unit_count);

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> values_;
};

/// Only "shapley" is supported.
SummaryMatrix build_summary_matrix(const std::string& method, std::size_t unit_count);
std::vector<double> apply_summary(const SummaryMatrix& a, std::span<const double> theta);

/// Attribution scores at or below this magnitude count as zero in the quality
/// metrics. Exact scores carry round-off near 1e-16, which would otherwise order
/// attributions that are zero in exact arithmetic.
inline constexpr double kScoreZeroTolerance = 1e-12;

/// Spearman correlation with average ranks for ties. Throws UndefinedMetric when
/// either ranking is constant.
double spearman_alignment(std::span<const double> scores, std::span<const double> reference);

/// Positive score mass inside `region` (observed units) over all positive mass.
/// Throws UndefinedMetric when no score is positive.
double localization_score(std::span<const double> scores, const SubsetMask& region);

}  // namespace recalx
