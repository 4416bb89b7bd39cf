#pragma once

#include <cstdint>
#include <vector>

#include "diffnaf/geometry.hpp"

namespace diffnaf {

enum class Provenance : uint8_t { real = 0, pseudo = 1 };

// One DR projection: detector-sized array of line-integral values tagged with
// its view angle, its provenance, and the loss weight its rays carry.
struct ProjectionImage {
    double angle_deg = 0.0;
    int rows = 0;
    int cols = 0;
    std::vector<double> pixels;  // row-major [v][u]
    Provenance provenance = Provenance::real;
    double weight = 1.0;

    double at(int v, int u) const { return pixels[static_cast<size_t>(v) * cols + u]; }
    double& at(int v, int u) { return pixels[static_cast<size_t>(v) * cols + u]; }
    size_t n_pixels() const { return static_cast<size_t>(rows) * cols; }
};

struct ProjectionSet {
    ScanGeometry geometry;
    std::vector<ProjectionImage> images;  // sorted by angle, no duplicates

    void validate() const;  // throws InvalidArgumentError / MismatchError
    std::vector<double> angles() const;
};

}  // namespace diffnaf
