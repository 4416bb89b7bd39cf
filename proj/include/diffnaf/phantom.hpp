#pragma once

#include <array>
#include <vector>

#include "diffnaf/geometry.hpp"
#include "diffnaf/volume.hpp"

namespace diffnaf {

// One ellipsoid of an analytic phantom. mu adds across overlapping
// ellipsoids. rotation is row-major and maps local to world coordinates.
struct EllipsoidSpec {
    Vec3 center_mm{};
    Vec3 semi_axes_mm{1.0, 1.0, 1.0};
    std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
    double mu = 0.0;  // 1/mm

    void validate() const;  // positive axes, orthonormal rotation (1e-9)
};

// Rotation by angle_deg about the z axis, row-major.
std::array<double, 9> rotation_z(double angle_deg);

// Voxelize: each voxel gets the summed mu of all ellipsoids containing its
// center. The grid is centered on the isocenter.
VolumeGrid make_phantom(const std::vector<EllipsoidSpec>& specs,
                        std::array<int, 3> dims, double voxel_mm);

// Exact line integral through the analytic ellipsoids: sum of mu times the
// chord length of the ray (t >= 0) inside each ellipsoid. Oracle for every
// discrete projector.
double analytic_line_integral(const std::vector<EllipsoidSpec>& specs,
                              const Ray& ray);

// Midpoint-rule line integral over the voxel-center span of the grid with
// trilinear interpolation; 0 if the ray misses the grid.
double discrete_line_integral(const VolumeGrid& volume, const Ray& ray,
                              int n_samples);

}  // namespace diffnaf
