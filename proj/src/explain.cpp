#include "recalx/explain.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "recalx/error.hpp"
#include "recalx/perturb.hpp"
#include "recalx/random.hpp"

namespace recalx {
namespace {

constexpr std::size_t kEvalChunk = 4096;

// s!(g-s-1)!/g! = 1 / (g * C(g-1, s)); exact in double for g <= 20.
std::vector<double> shapley_weights(std::size_t g) {
    std::vector<double> w(g);
    for (std::size_t s = 0; s < g; ++s) {
        double binom = 1.0;
        for (std::size_t j = 1; j <= s; ++j) {
            binom = binom * static_cast<double>(g - j) / static_cast<double>(j);
        }
        w[s] = 1.0 / (static_cast<double>(g) * std::round(binom));
    }
    return w;
}

std::vector<double> evaluate_all_subsets(const ValueFunction& v) {
    const std::size_t g = v.unit_count();
    const std::uint64_t total = std::uint64_t{1} << g;
    std::vector<double> values;
    values.reserve(total);
    std::vector<SubsetMask> chunk;
    for (std::uint64_t first = 0; first < total; first += kEvalChunk) {
        const std::uint64_t last = std::min<std::uint64_t>(total, first + kEvalChunk);
        chunk.clear();
        for (std::uint64_t bits = first; bits < last; ++bits) {
            chunk.push_back(SubsetMask::from_bits(bits, g));
        }
        const auto part = v.evaluate(chunk);
        values.insert(values.end(), part.begin(), part.end());
    }
    return values;
}

std::vector<double> snap_to_zero(std::span<const double> values) {
    std::vector<double> out(values.begin(), values.end());
    for (double& v : out) {
        if (std::abs(v) <= kScoreZeroTolerance) {
            v = 0.0;
        }
    }
    return out;
}

std::vector<double> average_ranks(std::span<const double> values) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(values.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) {
            ++j;
        }
        const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            ranks[order[k]] = rank;
        }
        i = j + 1;
    }
    return ranks;
}

}  // namespace

ValueFunction::ValueFunction(std::size_t unit_count, int target_class, BatchFn batch)
    : units_(unit_count), target_(target_class), batch_(std::move(batch)) {
    if (unit_count == 0) {
        throw InvalidInput("value function needs at least one unit");
    }
    if (!batch_) {
        throw InvalidInput("value function needs an evaluator");
    }
}

double ValueFunction::operator()(const SubsetMask& subset) const {
    return evaluate(std::span<const SubsetMask>(&subset, 1)).front();
}

std::vector<double> ValueFunction::evaluate(std::span<const SubsetMask> subsets) const {
    for (const auto& s : subsets) {
        if (s.size() != units_) {
            throw InvalidInput("mask has " + std::to_string(s.size()) + " units, value function expects " +
                               std::to_string(units_));
        }
    }
    auto out = batch_(subsets);
    if (out.size() != subsets.size()) {
        throw InvalidInput("value function returned " + std::to_string(out.size()) + " values for " +
                           std::to_string(subsets.size()) + " subsets");
    }
    if (!all_finite(out)) {
        throw NumericError("value function produced a non-finite value");
    }
    return out;
}

ValueFunction model_value_function(const RecalibratedModel& model, const Instance& x, std::optional<int> target_class) {
    const std::size_t classes = model.base().metadata().classes;
    int target = 0;
    if (target_class) {
        if (*target_class < 0 || static_cast<std::size_t>(*target_class) >= classes) {
            throw InvalidInput("target class " + std::to_string(*target_class) + " outside 0.." +
                               std::to_string(classes - 1));
        }
        target = *target_class;
    } else {
        target = static_cast<int>(argmax(model.base().eval_logits(x)));
    }
    const auto k = static_cast<std::size_t>(target);
    return ValueFunction(model.spec().unit_count(), target,
                         [&model, x, k](std::span<const SubsetMask> masks) {
                             const std::vector<Instance> xs(masks.size(), x);
                             const auto probs = model.predict(xs, masks);
                             std::vector<double> out(probs.size());
                             for (std::size_t i = 0; i < probs.size(); ++i) {
                                 out[i] = probs[i][k];
                             }
                             return out;
                         });
}

ValueFunction tabulated_value_function(std::vector<double> table, int target_class) {
    const std::size_t n = table.size();
    if (n < 2 || (n & (n - 1)) != 0) {
        throw InvalidInput("value table length must be 2^g with g >= 1, got " + std::to_string(n));
    }
    const auto g = static_cast<std::size_t>(std::countr_zero(n));
    return ValueFunction(g, target_class, [table = std::move(table)](std::span<const SubsetMask> masks) {
        std::vector<double> out;
        out.reserve(masks.size());
        for (const auto& m : masks) {
            out.push_back(table[m.to_bits()]);
        }
        return out;
    });
}

nlohmann::json Attribution::to_json() const {
    nlohmann::json j = {{"method", method},
                        {"target_class", target_class},
                        {"scores", scores},
                        {"evals", evaluations},
                        {"seed", seed}};
    if (!std_errors.empty()) {
        j["std_errors"] = std_errors;
    }
    return j;
}

std::string Attribution::to_csv() const {
    std::string out = "unit_index,score\n";
    for (std::size_t i = 0; i < scores.size(); ++i) {
        out += std::to_string(i) + "," + format_double(scores[i]) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------

Attribution shapley_exact(const ValueFunction& v) {
    const std::size_t g = v.unit_count();
    if (g > kMaxExactShapleyUnits) {
        throw LimitExceeded("exact Shapley limited to " + std::to_string(kMaxExactShapleyUnits) + " units, got " +
                            std::to_string(g));
    }
    const auto values = evaluate_all_subsets(v);
    const auto w = shapley_weights(g);

    Attribution a;
    a.method = "shapley-exact";
    a.target_class = v.target_class();
    a.evaluations = values.size();
    a.scores.assign(g, 0.0);
    const std::uint64_t total = values.size();
    for (std::size_t i = 0; i < g; ++i) {
        const std::uint64_t bit = std::uint64_t{1} << i;
        double phi = 0.0;
        for (std::uint64_t s = 0; s < total; ++s) {
            if (!(s & bit)) {
                phi += w[static_cast<std::size_t>(std::popcount(s))] * (values[s | bit] - values[s]);
            }
        }
        a.scores[i] = phi;
    }
    return a;
}

Attribution shapley_sampled(const ValueFunction& v, std::size_t permutations, std::uint64_t seed) {
    if (permutations < 1) {
        throw InvalidInput("sampled Shapley needs at least one permutation");
    }
    const std::size_t g = v.unit_count();
    Rng rng = derive_rng(SeedSpec(seed), "shapley-permutations", 0);

    std::vector<double> sum(g, 0.0);
    std::vector<double> sum_sq(g, 0.0);
    std::vector<std::size_t> order(g);
    std::vector<SubsetMask> masks;
    std::vector<std::vector<std::size_t>> orders;
    const std::size_t per_batch = std::max<std::size_t>(1, kEvalChunk / (g + 1));

    for (std::size_t done = 0; done < permutations;) {
        const std::size_t count = std::min(per_batch, permutations - done);
        masks.clear();
        orders.clear();
        for (std::size_t p = 0; p < count; ++p) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            rng.shuffle(order);
            SubsetMask prefix = SubsetMask::empty(g);
            masks.push_back(prefix);
            for (std::size_t unit : order) {
                prefix.set(unit, true);
                masks.push_back(prefix);
            }
            orders.push_back(order);
        }
        const auto values = v.evaluate(masks);
        for (std::size_t p = 0; p < count; ++p) {
            const double* row = values.data() + p * (g + 1);
            for (std::size_t pos = 0; pos < g; ++pos) {
                const double delta = row[pos + 1] - row[pos];
                sum[orders[p][pos]] += delta;
                sum_sq[orders[p][pos]] += delta * delta;
            }
        }
        done += count;
    }

    Attribution a;
    a.method = "shapley-sampled";
    a.target_class = v.target_class();
    a.evaluations = permutations * (g + 1);
    a.seed = seed;
    a.scores.resize(g);
    a.std_errors.assign(g, 0.0);
    const auto n = static_cast<double>(permutations);
    for (std::size_t i = 0; i < g; ++i) {
        a.scores[i] = sum[i] / n;
        if (permutations > 1) {
            const double var = std::max(0.0, (sum_sq[i] - n * a.scores[i] * a.scores[i]) / (n - 1.0));
            a.std_errors[i] = std::sqrt(var / n);
        }
    }
    return a;
}

Attribution lime_explain(const ValueFunction& v, const LimeOptions& options) {
    const std::size_t g = v.unit_count();
    if (!(options.kernel_width > 0.0) || !std::isfinite(options.kernel_width)) {
        throw InvalidInput("LIME kernel width must be positive");
    }
    if (!(options.ridge >= 0.0) || !std::isfinite(options.ridge)) {
        throw InvalidInput("LIME ridge must be nonnegative");
    }

    std::vector<SubsetMask> masks;
    if (options.enumerate_all) {
        if (g > kMaxLimeEnumerationUnits) {
            throw LimitExceeded("LIME enumeration limited to " + std::to_string(kMaxLimeEnumerationUnits) + " units");
        }
        masks = enumerate_subsets(g);
    } else {
        if (options.samples < g + 2) {
            throw InvalidInput("LIME needs at least g + 2 = " + std::to_string(g + 2) + " samples, got " +
                               std::to_string(options.samples));
        }
        Rng rng = derive_rng(SeedSpec(options.seed), "lime-masks", 0);
        masks.reserve(options.samples);
        for (std::size_t i = 0; i < options.samples; ++i) {
            masks.push_back(sample_uniform_subset(g, rng));
        }
    }

    std::vector<double> y;
    y.reserve(masks.size());
    for (std::size_t first = 0; first < masks.size(); first += kEvalChunk) {
        const std::size_t count = std::min(kEvalChunk, masks.size() - first);
        const auto part = v.evaluate(std::span<const SubsetMask>(masks).subspan(first, count));
        y.insert(y.end(), part.begin(), part.end());
    }

    const auto p = static_cast<Eigen::Index>(g + 1);
    Eigen::MatrixXd normal = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p);
    Eigen::VectorXd row(p);
    const double width_sq = options.kernel_width * options.kernel_width;
    for (std::size_t s = 0; s < masks.size(); ++s) {
        const double distance = 1.0 - static_cast<double>(masks[s].observed_count()) / static_cast<double>(g);
        const double weight = std::exp(-distance * distance / width_sq);
        row(0) = 1.0;
        for (std::size_t i = 0; i < g; ++i) {
            row(static_cast<Eigen::Index>(i + 1)) = masks[s].observed(i) ? 1.0 : 0.0;
        }
        normal.noalias() += weight * row * row.transpose();
        rhs.noalias() += weight * y[s] * row;
    }
    for (Eigen::Index i = 1; i < p; ++i) {
        normal(i, i) += options.ridge;
    }

    const Eigen::LDLT<Eigen::MatrixXd> ldlt(normal);
    if (ldlt.info() != Eigen::Success) {
        throw NumericError("LIME normal equations could not be factorized");
    }
    const Eigen::VectorXd beta = ldlt.solve(rhs);
    if (!beta.allFinite() || (normal * beta - rhs).norm() > 1e-6 * std::max(1.0, rhs.norm())) {
        throw NumericError("LIME normal equations are singular; increase the ridge or the sample count");
    }

    Attribution a;
    a.method = "lime";
    a.target_class = v.target_class();
    a.evaluations = masks.size();
    a.seed = options.enumerate_all ? 0 : options.seed;
    a.scores.resize(g);
    for (std::size_t i = 0; i < g; ++i) {
        a.scores[i] = beta(static_cast<Eigen::Index>(i + 1));
    }
    return a;
}

// ---------------------------------------------------------------------------

SummaryMatrix build_summary_matrix(const std::string& method, std::size_t unit_count) {
    if (method != "shapley") {
        throw InvalidInput("summary matrix available only for method \"shapley\", got \"" + method + "\"");
    }
    if (unit_count < 1 || unit_count > kMaxSummaryUnits) {
        throw LimitExceeded("summary matrix needs 1 <= g <= " + std::to_string(kMaxSummaryUnits) + ", got " +
                            std::to_string(unit_count));
    }
    const auto w = shapley_weights(unit_count);
    SummaryMatrix a;
    a.rows_ = unit_count;
    a.cols_ = std::size_t{1} << unit_count;
    a.values_.resize(a.rows_ * a.cols_);
    for (std::size_t i = 0; i < a.rows_; ++i) {
        for (std::size_t s = 0; s < a.cols_; ++s) {
            const auto size = static_cast<std::size_t>(std::popcount(s));
            a.values_[i * a.cols_ + s] = (s >> i) & 1U ? w[size - 1] : -w[size];
        }
    }
    return a;
}

std::vector<double> apply_summary(const SummaryMatrix& a, std::span<const double> theta) {
    if (theta.size() != a.cols()) {
        throw InvalidInput("summary matrix has " + std::to_string(a.cols()) + " columns, got " +
                           std::to_string(theta.size()) + " values");
    }
    std::vector<double> out(a.rows(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t s = 0; s < a.cols(); ++s) {
            out[i] += a.at(i, s) * theta[s];
        }
    }
    return out;
}

double spearman_alignment(std::span<const double> scores, std::span<const double> reference) {
    if (scores.size() != reference.size() || scores.size() < 2) {
        throw InvalidInput("Spearman correlation needs two equal-length vectors of length >= 2");
    }
    if (!all_finite(scores) || !all_finite(reference)) {
        throw InvalidInput("Spearman correlation needs finite values");
    }
    const auto ra = average_ranks(snap_to_zero(scores));
    const auto rb = average_ranks(snap_to_zero(reference));
    const double n = static_cast<double>(ra.size());
    const double mean = (n + 1.0) / 2.0;
    double cov = 0.0;
    double va = 0.0;
    double vb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        cov += (ra[i] - mean) * (rb[i] - mean);
        va += (ra[i] - mean) * (ra[i] - mean);
        vb += (rb[i] - mean) * (rb[i] - mean);
    }
    if (va == 0.0 || vb == 0.0) {
        throw UndefinedMetric("Spearman correlation undefined: a ranking is constant");
    }
    return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

double localization_score(std::span<const double> scores, const SubsetMask& region) {
    if (region.size() != scores.size()) {
        throw InvalidInput("region has " + std::to_string(region.size()) + " units, attribution has " +
                           std::to_string(scores.size()));
    }
    double inside = 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (scores[i] > kScoreZeroTolerance) {
            total += scores[i];
            if (region.observed(i)) {
                inside += scores[i];
            }
        }
    }
    if (total == 0.0) {
        throw UndefinedMetric("localization undefined: no positive attribution scores");
    }
    return inside / total;
}

}  // namespace recalx
