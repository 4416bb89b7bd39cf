#include "diffnaf/phantom.hpp"

#include <cmath>

#include "diffnaf/errors.hpp"

namespace diffnaf {

void EllipsoidSpec::validate() const {
    if (!(semi_axes_mm.x > 0.0 && semi_axes_mm.y > 0.0 && semi_axes_mm.z > 0.0))
        throw InvalidArgumentError("EllipsoidSpec: semi-axes must be strictly positive");
    // R * R^T == I within 1e-9
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            double dot = 0.0;
            for (int k = 0; k < 3; ++k) dot += rotation[3 * i + k] * rotation[3 * j + k];
            double expect = (i == j) ? 1.0 : 0.0;
            if (std::abs(dot - expect) > 1e-9)
                throw InvalidArgumentError("EllipsoidSpec: rotation is not orthonormal");
        }
    }
}

std::array<double, 9> rotation_z(double angle_deg) {
    double th = angle_deg * 0.017453292519943295;
    double c = std::cos(th), s = std::sin(th);
    return {c, -s, 0, s, c, 0, 0, 0, 1};
}

namespace {

// q = R^T (p - c), componentwise divided by the semi-axes.
inline Vec3 to_unit_sphere_frame(const EllipsoidSpec& e, const Vec3& p) {
    Vec3 d = p - e.center_mm;
    Vec3 q{e.rotation[0] * d.x + e.rotation[3] * d.y + e.rotation[6] * d.z,
           e.rotation[1] * d.x + e.rotation[4] * d.y + e.rotation[7] * d.z,
           e.rotation[2] * d.x + e.rotation[5] * d.y + e.rotation[8] * d.z};
    return {q.x / e.semi_axes_mm.x, q.y / e.semi_axes_mm.y, q.z / e.semi_axes_mm.z};
}

inline Vec3 rotate_transpose(const EllipsoidSpec& e, const Vec3& d) {
    return {e.rotation[0] * d.x + e.rotation[3] * d.y + e.rotation[6] * d.z,
            e.rotation[1] * d.x + e.rotation[4] * d.y + e.rotation[7] * d.z,
            e.rotation[2] * d.x + e.rotation[5] * d.y + e.rotation[8] * d.z};
}

}  // namespace

VolumeGrid make_phantom(const std::vector<EllipsoidSpec>& specs,
                        std::array<int, 3> dims, double voxel_mm) {
    for (const auto& e : specs) e.validate();
    VolumeGrid vol = VolumeGrid::centered(dims, voxel_mm);
    for (const auto& e : specs) {
        #pragma omp parallel for schedule(static)
        for (int z = 0; z < dims[2]; ++z) {
            for (int y = 0; y < dims[1]; ++y) {
                for (int x = 0; x < dims[0]; ++x) {
                    Vec3 q = to_unit_sphere_frame(e, vol.voxel_center(x, y, z));
                    if (q.dot(q) <= 1.0) vol.at(x, y, z) += e.mu;
                }
            }
        }
    }
    return vol;
}

double analytic_line_integral(const std::vector<EllipsoidSpec>& specs,
                              const Ray& ray) {
    double total = 0.0;
    for (const auto& e : specs) {
        // Quadratic in the world-space ray parameter t (arclength, since the
        // direction is unit in world space).
        Vec3 o = to_unit_sphere_frame(e, ray.origin_mm);
        Vec3 d = rotate_transpose(e, ray.direction);
        d = {d.x / e.semi_axes_mm.x, d.y / e.semi_axes_mm.y, d.z / e.semi_axes_mm.z};
        double a = d.dot(d);
        double b = 2.0 * o.dot(d);
        double c = o.dot(o) - 1.0;
        double disc = b * b - 4.0 * a * c;
        if (disc <= 0.0 || a == 0.0) continue;
        double sq = std::sqrt(disc);
        double t0 = (-b - sq) / (2.0 * a);
        double t1 = (-b + sq) / (2.0 * a);
        t0 = std::max(t0, 0.0);  // rays are half-lines
        if (t1 > t0) total += e.mu * (t1 - t0);
    }
    return total;
}

double discrete_line_integral(const VolumeGrid& volume, const Ray& ray,
                              int n_samples) {
    if (n_samples < 1)
        throw InvalidArgumentError("discrete_line_integral: n_samples must be >= 1");
    auto hit = ray_box_entry_exit(ray, volume.center_span_lo(), volume.center_span_hi());
    if (!hit) return 0.0;
    auto [t0, t1] = *hit;
    double dt = (t1 - t0) / n_samples;
    double acc = 0.0;
    for (int i = 0; i < n_samples; ++i) {
        double t = t0 + (i + 0.5) * dt;
        acc += volume.sample_trilinear(ray.origin_mm + t * ray.direction);
    }
    return acc * dt;
}

}  // namespace diffnaf
