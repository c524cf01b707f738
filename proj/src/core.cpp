#include "recalx/core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>

#include "recalx/error.hpp"

namespace recalx {

SubsetMask::SubsetMask(std::size_t units, bool observed) : bits_(units, observed ? 1 : 0) {}

SubsetMask SubsetMask::from_bits(std::uint64_t bits, std::size_t units) {
    if (units > 64) {
        throw LimitExceeded("SubsetMask::from_bits supports at most 64 units");
    }
    if (units < 64 && (bits >> units) != 0) {
        throw InvalidInput("subset bits set beyond unit " + std::to_string(units - 1));
    }
    SubsetMask mask(units);
    for (std::size_t i = 0; i < units; ++i) {
        mask.bits_[i] = static_cast<std::uint8_t>((bits >> i) & 1U);
    }
    return mask;
}

SubsetMask SubsetMask::from_indices(std::size_t units, std::span<const std::size_t> observed) {
    SubsetMask mask(units);
    for (std::size_t idx : observed) {
        if (idx >= units) {
            throw InvalidInput("subset index " + std::to_string(idx) + " out of range for " +
                               std::to_string(units) + " units");
        }
        mask.bits_[idx] = 1;
    }
    return mask;
}

std::size_t SubsetMask::observed_count() const noexcept {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

SubsetMask SubsetMask::complement() const {
    SubsetMask out(size());
    for (std::size_t i = 0; i < size(); ++i) {
        out.bits_[i] = bits_[i] ? 0 : 1;
    }
    return out;
}

std::uint64_t SubsetMask::to_bits() const {
    if (size() > 64) {
        throw LimitExceeded("SubsetMask::to_bits supports at most 64 units");
    }
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < size(); ++i) {
        if (bits_[i]) {
            bits |= std::uint64_t{1} << i;
        }
    }
    return bits;
}

std::string SubsetMask::to_string() const {
    std::string out(size(), '0');
    for (std::size_t i = 0; i < size(); ++i) {
        if (bits_[i]) {
            out[i] = '1';
        }
    }
    return out;
}

void Dataset::validate() const {
    if (feature_count < 1) {
        throw InvalidInput("dataset needs at least one feature");
    }
    if (class_count < 2) {
        throw InvalidInput("dataset needs at least two classes");
    }
    if (instances.size() != labels.size()) {
        throw InvalidInput("dataset has " + std::to_string(instances.size()) + " instances but " +
                           std::to_string(labels.size()) + " labels");
    }
    for (std::size_t i = 0; i < instances.size(); ++i) {
        if (instances[i].size() != feature_count) {
            throw InvalidInput("instance " + std::to_string(i) + " has " +
                               std::to_string(instances[i].size()) + " features, expected " +
                               std::to_string(feature_count));
        }
        if (!all_finite(instances[i])) {
            throw InvalidInput("instance " + std::to_string(i) + " has non-finite values");
        }
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= class_count) {
            throw InvalidInput("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                               " outside [0, " + std::to_string(class_count) + ")");
        }
    }
}

bool all_finite(std::span<const double> values) noexcept {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

std::size_t argmax(std::span<const double> values) {
    if (values.empty()) {
        throw InvalidInput("argmax of an empty vector");
    }
    std::size_t best = 0;
    for (std::size_t k = 1; k < values.size(); ++k) {
        if (values[k] > values[best]) {
            best = k;
        }
    }
    return best;
}

double log_sum_exp(std::span<const double> values) {
    if (values.empty()) {
        throw InvalidInput("log_sum_exp of an empty vector");
    }
    const double top = *std::max_element(values.begin(), values.end());
    double sum = 0.0;
    for (double v : values) {
        sum += std::exp(v - top);
    }
    return top + std::log(sum);
}

ProbVector softmax(std::span<const double> logits) {
    if (logits.empty()) {
        throw InvalidInput("softmax of an empty vector");
    }
    if (!all_finite(logits)) {
        throw InvalidInput("softmax input contains non-finite logits");
    }
    const double top = *std::max_element(logits.begin(), logits.end());
    ProbVector out(logits.size());
    double sum = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        out[k] = std::exp(logits[k] - top);
        sum += out[k];
    }
    for (double& p : out) {
        p /= sum;
    }
    return out;
}

void validate_probabilities(std::span<const double> probs, double tolerance) {
    if (probs.empty()) {
        throw InvalidInput("probability vector is empty");
    }
    double sum = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw InvalidInput("probability entry outside [0,1]");
        }
        sum += p;
    }
    if (std::abs(sum - 1.0) > tolerance) {
        throw InvalidInput("probabilities sum to " + format_double(sum) + ", not 1");
    }
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) {
        throw InvalidInput("kl_divergence: length mismatch");
    }
    validate_probabilities(p);
    validate_probabilities(q);
    double kl = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        if (p[k] == 0.0) {
            continue;
        }
        if (q[k] == 0.0) {
            throw DivergenceUndefined("kl_divergence: q is zero where p is positive (class " +
                                      std::to_string(k) + ")");
        }
        kl += p[k] * std::log(p[k] / q[k]);
    }
    // Rounding can leave tiny negative totals for p ≈ q.
    return std::max(kl, 0.0);
}

VectorGrouping group_vectors(std::span<const std::vector<double>> vectors, double tolerance) {
    VectorGrouping out;
    out.group_of.reserve(vectors.size());
    std::multimap<double, std::size_t> by_first;

    auto matches = [tolerance](const std::vector<double>& a, const std::vector<double>& b) {
        if (a.size() != b.size()) {
            return false;
        }
        for (std::size_t k = 0; k < a.size(); ++k) {
            if (std::abs(a[k] - b[k]) > tolerance) {
                return false;
            }
        }
        return true;
    };

    for (const auto& v : vectors) {
        const double key = v.empty() ? 0.0 : v.front();
        std::size_t found = std::numeric_limits<std::size_t>::max();
        for (auto it = by_first.lower_bound(key - tolerance);
             it != by_first.end() && it->first <= key + tolerance; ++it) {
            if (it->second < found && matches(out.representatives[it->second], v)) {
                found = it->second;
            }
        }
        if (found == std::numeric_limits<std::size_t>::max()) {
            found = out.representatives.size();
            out.representatives.push_back(v);
            by_first.emplace(key, found);
        }
        out.group_of.push_back(found);
    }
    return out;
}

std::string format_double(double value) {
    if (std::isnan(value)) {
        return "nan";
    }
    if (std::isinf(value)) {
        return value > 0 ? "inf" : "-inf";
    }
    char buffer[64];
    auto [end, ec] = std::to_chars(buffer, buffer + sizeof(buffer), value);
    if (ec != std::errc{}) {
        throw NumericError("format_double: conversion failed");
    }
    return std::string(buffer, end);
}

}  // namespace recalx
