#include "recalx/random.hpp"

#include <cmath>
#include <numeric>

#include "recalx/error.hpp"

namespace recalx {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t mix(std::uint64_t state, std::uint64_t value) {
    return splitmix64(state ^ splitmix64(value));
}

}  // namespace

SeedSpec SeedSpec::child(std::string_view label, std::uint64_t index) const {
    SeedSpec out = *this;
    out.path_.emplace_back(std::string(label), index);
    return out;
}

std::uint64_t SeedSpec::key() const noexcept {
    std::uint64_t state = splitmix64(master_);
    for (const auto& [label, index] : path_) {
        state = mix(state, fnv1a(label));
        state = mix(state, index);
    }
    return state;
}

double Rng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::uniform_index(std::uint64_t n) {
    if (n == 0) {
        throw InvalidInput("uniform_index requires n > 0");
    }
    // Lemire's multiply-and-reject.
    std::uint64_t x = engine_();
    __extension__ using u128 = unsigned __int128;
    u128 m = static_cast<u128>(x) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
        const std::uint64_t threshold = (0 - n) % n;
        while (low < threshold) {
            x = engine_();
            m = static_cast<u128>(x) * n;
            low = static_cast<std::uint64_t>(m);
        }
    }
    return static_cast<std::uint64_t>(m >> 64);
}

double Rng::normal() {
    // Box-Muller; one value per call keeps the stream position simple.
    double u1 = uniform();
    while (u1 <= 0.0) {
        u1 = uniform();
    }
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double Rng::gamma(double shape) {
    if (!(shape > 0.0)) {
        throw InvalidInput("gamma shape must be positive");
    }
    if (shape < 1.0) {
        double u = uniform();
        while (u <= 0.0) {
            u = uniform();
        }
        return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x = normal();
        double v = 1.0 + c * x;
        if (v <= 0.0) {
            continue;
        }
        v = v * v * v;
        const double u = uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) {
            return d * v;
        }
        if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) {
            return d * v;
        }
    }
}

std::size_t Rng::categorical(std::span<const double> weights) {
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (!(total > 0.0)) {
        throw InvalidInput("categorical weights must have positive total");
    }
    const double target = uniform() * total;
    double running = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
        running += weights[k];
        if (target < running) {
            return k;
        }
    }
    // Rounding at the top end: return the last positive weight.
    for (std::size_t k = weights.size(); k-- > 0;) {
        if (weights[k] > 0.0) {
            return k;
        }
    }
    return weights.size() - 1;
}

Rng derive_rng(const SeedSpec& seed, std::string_view label, std::uint64_t index) {
    return Rng(seed.child(label, index).key());
}

std::vector<double> dirichlet(Rng& rng, std::size_t dimension, double alpha) {
    std::vector<double> out(dimension);
    double sum = 0.0;
    for (double& v : out) {
        v = rng.gamma(alpha);
        sum += v;
    }
    for (double& v : out) {
        v /= sum;
    }
    return out;
}

}  // namespace recalx
