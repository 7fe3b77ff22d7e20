#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "disagg/errors.hpp"

namespace disagg {

// Shortest round-trip decimal form; parsing it back yields the same bits.
// Used everywhere a double lands in a text artifact so reruns are
// byte-identical.
inline std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& what) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw DataError("could not parse number '" + std::string(s) + "' in " + what);
    return v;
}

inline long parse_long(std::string_view s, const std::string& what) {
    long v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw DataError("could not parse integer '" + std::string(s) + "' in " + what);
    return v;
}

// FNV-1a, used for the provenance hashes chained through the artifacts.
class Fnv1a {
  public:
    void update(const void* data, size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) { update(s.data(), s.size()); }
    std::string hex() const {
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(state_));
        return std::string(buf);
    }

  private:
    uint64_t state_ = 0xcbf29ce484222325ULL;
};

// Deterministic parallel map: item i always lands in slot i, so results are
// independent of the worker count.
inline void parallel_for(size_t n, int ncores, const std::function<void(size_t)>& body) {
    if (ncores <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) body(i);
        return;
    }
    size_t nthreads = std::min<size_t>(static_cast<size_t>(ncores), n);
    std::vector<std::thread> workers;
    workers.reserve(nthreads);
    for (size_t t = 0; t < nthreads; ++t) {
        workers.emplace_back([&, t]() {
            for (size_t i = t; i < n; i += nthreads) body(i);
        });
    }
    for (auto& w : workers) w.join();
}

}  // namespace disagg
