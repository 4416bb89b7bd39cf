#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "diffnaf/geometry.hpp"

namespace diffnaf {

// Dense 3D attenuation map. values is row-major with z slowest:
// index = (z * ny + y) * nx + x. origin_mm is the center of voxel (0,0,0).
struct VolumeGrid {
    std::array<int, 3> dims{0, 0, 0};  // nx, ny, nz
    double voxel_mm = 1.0;
    Vec3 origin_mm{};
    std::vector<double> values;

    VolumeGrid() = default;
    VolumeGrid(std::array<int, 3> d, double voxel, Vec3 origin);

    // Grid centered on the isocenter; spans dims * voxel_mm per axis.
    static VolumeGrid centered(std::array<int, 3> dims, double voxel_mm);

    size_t n_voxels() const {
        return static_cast<size_t>(dims[0]) * dims[1] * dims[2];
    }
    size_t index(int x, int y, int z) const {
        return (static_cast<size_t>(z) * dims[1] + y) * dims[0] + x;
    }
    double at(int x, int y, int z) const { return values[index(x, y, z)]; }
    double& at(int x, int y, int z) { return values[index(x, y, z)]; }

    Vec3 voxel_center(int x, int y, int z) const {
        return origin_mm + Vec3{x * voxel_mm, y * voxel_mm, z * voxel_mm};
    }

    // Box spanned by the voxel centers (full-support region of the
    // trilinear interpolant).
    Vec3 center_span_lo() const { return origin_mm; }
    Vec3 center_span_hi() const {
        return origin_mm + Vec3{(dims[0] - 1) * voxel_mm, (dims[1] - 1) * voxel_mm,
                                (dims[2] - 1) * voxel_mm};
    }

    // Trilinear interpolation at an arbitrary point; zero outside the grid.
    double sample_trilinear(const Vec3& p) const;

    void require_finite(const char* what) const;  // throws on NaN/Inf
};

}  // namespace diffnaf
