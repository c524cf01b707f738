#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace recalx {

/// Master seed plus a labelled derivation path. Equal specs give equal streams.
class SeedSpec {
public:
    SeedSpec() = default;
    explicit SeedSpec(std::uint64_t master) : master_(master) {}

    std::uint64_t master() const noexcept { return master_; }
    const std::vector<std::pair<std::string, std::uint64_t>>& path() const noexcept { return path_; }

    SeedSpec child(std::string_view label, std::uint64_t index) const;
    /// 64-bit digest of master and path.
    std::uint64_t key() const noexcept;

private:
    std::uint64_t master_ = 0;
    std::vector<std::pair<std::string, std::uint64_t>> path_;
};

/// Deterministic random stream. Distribution code is implemented here rather than
/// taken from <random> so that draws are identical across standard libraries.
class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    static constexpr result_type min() { return std::mt19937_64::min(); }
    static constexpr result_type max() { return std::mt19937_64::max(); }
    result_type operator()() { return engine_(); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n). Requires n > 0.
    std::uint64_t uniform_index(std::uint64_t n);
    double normal();
    /// Marsaglia-Tsang; shape > 0, unit scale.
    double gamma(double shape);
    /// Draws index k with probability weights[k] / Σ weights.
    std::size_t categorical(std::span<const double> weights);

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::swap(items[i - 1], items[uniform_index(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
};

Rng derive_rng(const SeedSpec& seed, std::string_view label, std::uint64_t index);

/// Symmetric Dirichlet(alpha) draw of the given dimension.
std::vector<double> dirichlet(Rng& rng, std::size_t dimension, double alpha);

}  // namespace recalx
