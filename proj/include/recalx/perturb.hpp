#pragma once

#include <optional>
#include <vector>

#include <json.hpp>

#include "recalx/core.hpp"
#include "recalx/random.hpp"

namespace recalx {

/// Disjoint, nonempty index sets that together cover {0..d-1}. Masks over a
/// grouped spec address groups ("units") rather than raw features.
class FeatureGroups {
public:
    FeatureGroups(std::vector<std::vector<std::size_t>> groups, std::size_t feature_count);

    std::size_t group_count() const noexcept { return groups_.size(); }
    std::size_t feature_count() const noexcept { return feature_count_; }
    const std::vector<std::size_t>& group(std::size_t g) const { return groups_.at(g); }
    const std::vector<std::vector<std::size_t>>& groups() const noexcept { return groups_; }
    bool equal_sizes() const noexcept;

private:
    std::vector<std::vector<std::size_t>> groups_;
    std::size_t feature_count_;
};

/// Fixed-baseline replacement: perturbed features take the baseline value.
struct PerturbationSpec {
    std::vector<double> baseline;
    std::optional<FeatureGroups> groups;

    static PerturbationSpec zeros(std::size_t feature_count);

    std::size_t feature_count() const noexcept { return baseline.size(); }
    /// Number of maskable units: group count when grouped, else d.
    std::size_t unit_count() const noexcept;
    /// Number of raw features in unit u.
    std::size_t unit_size(std::size_t unit) const;

    /// {"baseline": [...], "groups": [[...], ...]} (groups optional)
    static PerturbationSpec from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

/// π(x, S): units in S keep x's values, the rest take the baseline.
Instance apply_perturbation(const Instance& x, const SubsetMask& observed, const PerturbationSpec& spec);

/// λ(S): share of raw features perturbed (groups weighted by size).
double perturbation_level(const SubsetMask& observed, const PerturbationSpec& spec);

/// B equal-width bins over [0,1], numbered 1..B. Bins are half-open
/// [(b-1)/B, b/B) except the last, which is closed.
class PerturbationLevelBins {
public:
    explicit PerturbationLevelBins(std::size_t count);

    std::size_t count() const noexcept { return count_; }
    double lower(std::size_t bin) const;
    double upper(std::size_t bin) const;
    std::vector<double> edges() const;
    std::size_t bin_of(double level) const;

    friend bool operator==(const PerturbationLevelBins&, const PerturbationLevelBins&) = default;

private:
    std::size_t count_;
};

/// Perturbed-unit counts m whose level m/g falls in `bin`.
std::vector<std::size_t> feasible_perturbed_counts(std::size_t bin, const PerturbationLevelBins& bins,
                                                   std::size_t unit_count);

/// Uniform over feasible perturbed counts, then uniform over subsets of that count.
/// Throws InfeasibleBin when no count maps into the bin.
SubsetMask sample_subset_in_bin(std::size_t bin, const PerturbationLevelBins& bins, std::size_t unit_count,
                                Rng& rng);

/// Spec-aware variant: with unequal group sizes the count is chosen as above and
/// the subset is redrawn until the size-weighted level lands in the bin.
SubsetMask sample_subset_in_bin(std::size_t bin, const PerturbationLevelBins& bins, const PerturbationSpec& spec,
                                Rng& rng);

/// Each unit observed independently with probability 1/2.
SubsetMask sample_uniform_subset(std::size_t unit_count, Rng& rng);

inline constexpr std::size_t kMaxEnumerationUnits = 25;

/// All 2^g masks in binary-counter order (bit i of the index = unit i observed).
std::vector<SubsetMask> enumerate_subsets(std::size_t unit_count);

}  // namespace recalx
