#include "recalx/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json_util.hpp"
#include "recalx/error.hpp"

namespace recalx {

FeatureGroups::FeatureGroups(std::vector<std::vector<std::size_t>> groups, std::size_t feature_count)
    : groups_(std::move(groups)), feature_count_(feature_count) {
    std::vector<int> seen(feature_count, 0);
    for (const auto& g : groups_) {
        if (g.empty()) {
            throw InvalidInput("feature groups must be nonempty");
        }
        for (std::size_t idx : g) {
            if (idx >= feature_count) {
                throw InvalidInput("feature group index " + std::to_string(idx) + " out of range");
            }
            if (seen[idx]++) {
                throw InvalidInput("feature " + std::to_string(idx) + " appears in more than one group");
            }
        }
    }
    for (std::size_t j = 0; j < feature_count; ++j) {
        if (!seen[j]) {
            throw InvalidInput("feature " + std::to_string(j) + " is not covered by any group");
        }
    }
}

bool FeatureGroups::equal_sizes() const noexcept {
    return std::all_of(groups_.begin(), groups_.end(),
                       [&](const auto& g) { return g.size() == groups_.front().size(); });
}

PerturbationSpec PerturbationSpec::zeros(std::size_t feature_count) {
    return PerturbationSpec{std::vector<double>(feature_count, 0.0), std::nullopt};
}

std::size_t PerturbationSpec::unit_count() const noexcept {
    return groups ? groups->group_count() : baseline.size();
}

std::size_t PerturbationSpec::unit_size(std::size_t unit) const {
    return groups ? groups->group(unit).size() : 1;
}

PerturbationSpec PerturbationSpec::from_json(const nlohmann::json& j) {
    PerturbationSpec spec;
    spec.baseline = detail::json_to_doubles(detail::require_field(j, "baseline", "perturbation spec"), "baseline");
    if (spec.baseline.empty() || !all_finite(spec.baseline)) {
        throw InvalidInput("perturbation baseline must be a nonempty finite vector");
    }
    if (j.contains("groups") && !j.at("groups").is_null()) {
        std::vector<std::vector<std::size_t>> groups;
        for (const auto& g : j.at("groups")) {
            std::vector<std::size_t> members;
            if (!g.is_array()) {
                throw ParseError("perturbation spec: each group must be an array of indices");
            }
            for (const auto& idx : g) {
                members.push_back(detail::json_to_count(idx, "group index"));
            }
            groups.push_back(std::move(members));
        }
        spec.groups.emplace(std::move(groups), spec.baseline.size());
    }
    return spec;
}

nlohmann::json PerturbationSpec::to_json() const {
    nlohmann::json j;
    j["baseline"] = baseline;
    if (groups) {
        j["groups"] = groups->groups();
    }
    return j;
}

Instance apply_perturbation(const Instance& x, const SubsetMask& observed, const PerturbationSpec& spec) {
    if (x.size() != spec.feature_count()) {
        throw InvalidInput("instance has " + std::to_string(x.size()) + " features, perturbation spec expects " +
                           std::to_string(spec.feature_count()));
    }
    if (observed.size() != spec.unit_count()) {
        throw InvalidInput("mask has " + std::to_string(observed.size()) + " units, expected " +
                           std::to_string(spec.unit_count()));
    }
    Instance out = x;
    if (spec.groups) {
        for (std::size_t u = 0; u < observed.size(); ++u) {
            if (!observed.observed(u)) {
                for (std::size_t j : spec.groups->group(u)) {
                    out[j] = spec.baseline[j];
                }
            }
        }
    } else {
        for (std::size_t j = 0; j < out.size(); ++j) {
            if (!observed.observed(j)) {
                out[j] = spec.baseline[j];
            }
        }
    }
    return out;
}

double perturbation_level(const SubsetMask& observed, const PerturbationSpec& spec) {
    if (observed.size() != spec.unit_count()) {
        throw InvalidInput("mask has " + std::to_string(observed.size()) + " units, expected " +
                           std::to_string(spec.unit_count()));
    }
    const std::size_t d = spec.feature_count();
    if (d == 0) {
        throw InvalidInput("perturbation level undefined for zero features");
    }
    std::size_t perturbed = 0;
    for (std::size_t u = 0; u < observed.size(); ++u) {
        if (!observed.observed(u)) {
            perturbed += spec.unit_size(u);
        }
    }
    return static_cast<double>(perturbed) / static_cast<double>(d);
}

// ---------------------------------------------------------------------------

PerturbationLevelBins::PerturbationLevelBins(std::size_t count) : count_(count) {
    if (count < 1) {
        throw InvalidInput("need at least one perturbation-level bin");
    }
}

double PerturbationLevelBins::lower(std::size_t bin) const {
    if (bin < 1 || bin > count_) {
        throw InvalidInput("bin index " + std::to_string(bin) + " outside 1.." + std::to_string(count_));
    }
    return static_cast<double>(bin - 1) / static_cast<double>(count_);
}

double PerturbationLevelBins::upper(std::size_t bin) const {
    if (bin < 1 || bin > count_) {
        throw InvalidInput("bin index " + std::to_string(bin) + " outside 1.." + std::to_string(count_));
    }
    return static_cast<double>(bin) / static_cast<double>(count_);
}

std::vector<double> PerturbationLevelBins::edges() const {
    std::vector<double> out(count_ + 1);
    for (std::size_t b = 0; b <= count_; ++b) {
        out[b] = static_cast<double>(b) / static_cast<double>(count_);
    }
    return out;
}

std::size_t PerturbationLevelBins::bin_of(double level) const {
    if (!(level >= 0.0 && level <= 1.0)) {
        throw InvalidInput("perturbation level " + format_double(level) + " outside [0,1]");
    }
    // Compare against the same edge values lower()/upper() report so that a level
    // equal to an edge always opens the next bin.
    for (std::size_t b = 1; b < count_; ++b) {
        if (level < upper(b)) {
            return b;
        }
    }
    return count_;
}

std::vector<std::size_t> feasible_perturbed_counts(std::size_t bin, const PerturbationLevelBins& bins,
                                                   std::size_t unit_count) {
    if (bin < 1 || bin > bins.count()) {
        throw InvalidInput("bin index " + std::to_string(bin) + " outside 1.." + std::to_string(bins.count()));
    }
    std::vector<std::size_t> out;
    if (unit_count == 0) {
        return out;
    }
    for (std::size_t m = 0; m <= unit_count; ++m) {
        const double level = static_cast<double>(m) / static_cast<double>(unit_count);
        if (bins.bin_of(level) == bin) {
            out.push_back(m);
        }
    }
    return out;
}

namespace {

SubsetMask mask_with_perturbed_count(std::size_t unit_count, std::size_t perturbed, Rng& rng) {
    std::vector<std::size_t> order(unit_count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    // Partial Fisher-Yates: the first `perturbed` slots are a uniform m-subset.
    for (std::size_t i = 0; i < perturbed; ++i) {
        std::swap(order[i], order[i + rng.uniform_index(unit_count - i)]);
    }
    SubsetMask mask = SubsetMask::full(unit_count);
    for (std::size_t i = 0; i < perturbed; ++i) {
        mask.set(order[i], false);
    }
    return mask;
}

}  // namespace

SubsetMask sample_subset_in_bin(std::size_t bin, const PerturbationLevelBins& bins, std::size_t unit_count,
                                Rng& rng) {
    const auto counts = feasible_perturbed_counts(bin, bins, unit_count);
    if (counts.empty()) {
        throw InfeasibleBin("no subset of " + std::to_string(unit_count) + " units has a perturbation level in bin " +
                                std::to_string(bin) + " of " + std::to_string(bins.count()),
                            bin);
    }
    const std::size_t m = counts[rng.uniform_index(counts.size())];
    return mask_with_perturbed_count(unit_count, m, rng);
}

SubsetMask sample_subset_in_bin(std::size_t bin, const PerturbationLevelBins& bins, const PerturbationSpec& spec,
                                Rng& rng) {
    const std::size_t g = spec.unit_count();
    if (!spec.groups || spec.groups->equal_sizes()) {
        return sample_subset_in_bin(bin, bins, g, rng);
    }
    constexpr int kMaxAttempts = 10000;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        SubsetMask mask = sample_subset_in_bin(bin, bins, g, rng);
        if (bins.bin_of(perturbation_level(mask, spec)) == bin) {
            return mask;
        }
    }
    throw InfeasibleBin("could not draw a grouped subset with size-weighted level in bin " + std::to_string(bin),
                        bin);
}

SubsetMask sample_uniform_subset(std::size_t unit_count, Rng& rng) {
    SubsetMask mask(unit_count);
    for (std::size_t u = 0; u < unit_count; ++u) {
        mask.set(u, (rng() >> 63) != 0);
    }
    return mask;
}

std::vector<SubsetMask> enumerate_subsets(std::size_t unit_count) {
    if (unit_count > kMaxEnumerationUnits) {
        throw LimitExceeded("subset enumeration limited to " + std::to_string(kMaxEnumerationUnits) + " units, got " +
                            std::to_string(unit_count));
    }
    const std::uint64_t total = std::uint64_t{1} << unit_count;
    std::vector<SubsetMask> out;
    out.reserve(total);
    for (std::uint64_t bits = 0; bits < total; ++bits) {
        out.push_back(SubsetMask::from_bits(bits, unit_count));
    }
    return out;
}

}  // namespace recalx
