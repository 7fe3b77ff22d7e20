#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "disagg/errors.hpp"

namespace disagg {

// mt19937_64 is bit-exact by the standard; the transforms below are our own
// so that draws do not depend on libstdc++'s unspecified distribution
// implementations. All sampled artifacts inherit reproducibility from this.
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    // Independent substream: hash the (seed, stream) pair through splitmix64.
    static Rng stream(uint64_t seed, uint64_t stream_id) {
        uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream_id + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return Rng(z ^ (z >> 31));
    }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Uniform on (0, 1) — safe under log().
    double uniform_pos() {
        double u;
        do {
            u = uniform();
        } while (u <= 0.0);
        return u;
    }

    // Marsaglia polar method.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        have_spare_ = true;
        return u * f;
    }

    // Exact Poisson. Sequential inversion for small means; larger means split
    // recursively (a Poisson sum is Poisson).
    long poisson(double lambda) {
        if (!(lambda >= 0.0)) throw InternalError("poisson: negative mean");
        if (lambda == 0.0) return 0;
        if (lambda > 60.0) return poisson(lambda / 2.0) + poisson(lambda / 2.0);
        double p = std::exp(-lambda), cdf = p;
        double u = uniform();
        long k = 0;
        while (u > cdf && k < 100000) {
            ++k;
            p *= lambda / static_cast<double>(k);
            cdf += p;
        }
        return k;
    }

    // Exact Binomial via Bernoulli sum; trial counts here are small.
    long binomial(long n, double p) {
        if (n < 0 || p < 0.0 || p > 1.0) throw InternalError("binomial: invalid arguments");
        long k = 0;
        for (long i = 0; i < n; ++i)
            if (uniform() < p) ++k;
        return k;
    }

    uint64_t raw() { return engine_(); }

  private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace disagg
