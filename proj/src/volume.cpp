#include "diffnaf/volume.hpp"

#include <cmath>
#include <string>

#include "diffnaf/errors.hpp"

namespace diffnaf {

VolumeGrid::VolumeGrid(std::array<int, 3> d, double voxel, Vec3 origin)
    : dims(d), voxel_mm(voxel), origin_mm(origin) {
    if (d[0] < 1 || d[1] < 1 || d[2] < 1)
        throw InvalidArgumentError("VolumeGrid: dims must be >= 1 per axis");
    if (!(voxel > 0.0))
        throw InvalidArgumentError("VolumeGrid: voxel_mm must be > 0");
    values.assign(n_voxels(), 0.0);
}

VolumeGrid VolumeGrid::centered(std::array<int, 3> dims, double voxel_mm) {
    Vec3 origin{-(dims[0] - 1) * 0.5 * voxel_mm, -(dims[1] - 1) * 0.5 * voxel_mm,
                -(dims[2] - 1) * 0.5 * voxel_mm};
    return VolumeGrid(dims, voxel_mm, origin);
}

double VolumeGrid::sample_trilinear(const Vec3& p) const {
    // Continuous grid coordinates: voxel centers at integers.
    double gx = (p.x - origin_mm.x) / voxel_mm;
    double gy = (p.y - origin_mm.y) / voxel_mm;
    double gz = (p.z - origin_mm.z) / voxel_mm;
    int x0 = static_cast<int>(std::floor(gx));
    int y0 = static_cast<int>(std::floor(gy));
    int z0 = static_cast<int>(std::floor(gz));
    double fx = gx - x0, fy = gy - y0, fz = gz - z0;

    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz) {
        int z = z0 + dz;
        if (z < 0 || z >= dims[2]) continue;
        double wz = dz ? fz : 1.0 - fz;
        for (int dy = 0; dy < 2; ++dy) {
            int y = y0 + dy;
            if (y < 0 || y >= dims[1]) continue;
            double wy = dy ? fy : 1.0 - fy;
            for (int dx = 0; dx < 2; ++dx) {
                int x = x0 + dx;
                if (x < 0 || x >= dims[0]) continue;
                double wx = dx ? fx : 1.0 - fx;
                acc += wz * wy * wx * at(x, y, z);
            }
        }
    }
    return acc;
}

void VolumeGrid::require_finite(const char* what) const {
    for (double v : values)
        if (!std::isfinite(v))
            throw InvalidArgumentError(std::string(what) + ": non-finite voxel value");
}

}  // namespace diffnaf
