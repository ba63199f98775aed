#pragma once

// Seeded random source with platform-independent draws.
//
// std::mt19937_64 output is fully specified by the standard, but the
// standard distributions are not, so the conversions to doubles, integers
// and Gaussians are done here.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace triqdef {

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n), unbiased.
    std::uint64_t below(std::uint64_t n);
    /// Standard normal via Box-Muller (no cached second value).
    double normal();

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

    /// Derive an independent stream, e.g. one per data loader or attack.
    Rng fork(std::uint64_t stream);

    std::string state() const;
    void set_state(const std::string& s);
    bool operator==(const Rng& o) const { return engine_ == o.engine_; }

private:
    std::mt19937_64 engine_;
};

} // namespace triqdef
