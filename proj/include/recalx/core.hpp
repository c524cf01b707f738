#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace recalx {

/// Feature values of one sample x.
using Instance = std::vector<double>;
/// Pre-softmax model outputs z(x).
using LogitVector = std::vector<double>;
/// Class probabilities; nonnegative and summing to one.
using ProbVector = std::vector<double>;

/// Probability clamp used by estimators that need q > 0.
inline constexpr double kProbabilityFloor = 1e-12;

/// Observed (true) vs perturbed (false) flag per feature or feature group.
class SubsetMask {
public:
    SubsetMask() = default;
    explicit SubsetMask(std::size_t units, bool observed = false);

    static SubsetMask full(std::size_t units) { return SubsetMask(units, true); }
    static SubsetMask empty(std::size_t units) { return SubsetMask(units, false); }
    /// Bit i of `bits` set means unit i is observed. Requires units <= 64.
    static SubsetMask from_bits(std::uint64_t bits, std::size_t units);
    static SubsetMask from_indices(std::size_t units, std::span<const std::size_t> observed);

    std::size_t size() const noexcept { return bits_.size(); }
    bool observed(std::size_t unit) const { return bits_.at(unit) != 0; }
    void set(std::size_t unit, bool observed) { bits_.at(unit) = observed ? 1 : 0; }

    std::size_t observed_count() const noexcept;
    SubsetMask complement() const;
    std::uint64_t to_bits() const;
    /// One character per unit, '1' = observed, unit 0 first.
    std::string to_string() const;

    friend bool operator==(const SubsetMask&, const SubsetMask&) = default;

private:
    std::vector<std::uint8_t> bits_;
};

struct Dataset {
    std::vector<Instance> instances;
    std::vector<int> labels;
    std::size_t feature_count = 0;
    std::size_t class_count = 0;

    std::size_t size() const noexcept { return instances.size(); }
    /// Throws InvalidInput when lengths, label range or finiteness are violated.
    void validate() const;
};

bool all_finite(std::span<const double> values) noexcept;

/// Lowest index among the maximal entries.
std::size_t argmax(std::span<const double> values);

/// Numerically stable softmax (max-subtraction).
ProbVector softmax(std::span<const double> logits);

/// log Σ exp(v), stable.
double log_sum_exp(std::span<const double> values);

/// Throws InvalidInput unless entries are in [0,1] and sum to 1 within `tolerance`.
void validate_probabilities(std::span<const double> probs, double tolerance = 1e-9);

/// D_KL(p ‖ q) in nats with 0·log 0 = 0. Throws DivergenceUndefined when q_k = 0 < p_k.
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// Assigns a group id to every vector; two vectors share a group when they match
/// a group representative within `tolerance` in every coordinate. Ids are dense
/// and numbered in order of first appearance.
struct VectorGrouping {
    std::vector<std::size_t> group_of;
    std::vector<std::vector<double>> representatives;

    std::size_t group_count() const noexcept { return representatives.size(); }
};
VectorGrouping group_vectors(std::span<const std::vector<double>> vectors, double tolerance);

/// Shortest decimal text that round-trips to the same double.
std::string format_double(double value);

}  // namespace recalx
