#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace disagg {

using Ring = std::vector<std::array<double, 2>>;  // closed: front() == back()

// Response polygons. A feature's rings are kept flat (outer rings and holes
// alike); containment uses the even-odd rule, so ring roles and orientation
// do not matter. Missing responses / sample sizes are NaN.
struct PolygonSet {
    std::vector<std::string> ids;
    std::vector<double> responses;
    std::vector<double> sample_sizes;  // empty when no sample-size property was read
    std::vector<std::vector<Ring>> rings;

    size_t size() const { return ids.size(); }
    bool has_sample_sizes() const { return !sample_sizes.empty(); }
};

// Even-odd ray cast with half-open boundaries: points on bottom/left edges
// are inside, on top/right edges outside, so grids of touching polygons
// claim every cell center exactly once.
inline bool point_in_rings(const std::vector<Ring>& rings, double x, double y) {
    bool inside = false;
    for (const Ring& ring : rings) {
        size_t n = ring.size();
        if (n < 2) continue;
        for (size_t i = 0, j = n - 1; i < n; j = i++) {
            double xi = ring[i][0], yi = ring[i][1];
            double xj = ring[j][0], yj = ring[j][1];
            if ((yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi)
                inside = !inside;
        }
    }
    return inside;
}

}  // namespace disagg
