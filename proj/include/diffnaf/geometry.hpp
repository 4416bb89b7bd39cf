#pragma once

#include <cmath>
#include <optional>
#include <utility>
#include <vector>

namespace diffnaf {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        double n = norm();
        return {x / n, y / n, z / n};
    }
    double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

// A half-line from a source point; direction has unit norm.
struct Ray {
    Vec3 origin_mm;
    Vec3 direction;
};

struct SamplePoint {
    Vec3 position_mm;
    double t_mm = 0.0;
    double dt_mm = 0.0;
};

// Circular multi-source cone-beam layout. Sources sit on a circle of radius
// sod_mm in the z = 0 plane; a flat detector faces each source from the
// opposite side at distance sdd_mm. Detector u runs in the rotation plane,
// v along the rotation axis; rays hit pixel centers.
struct ScanGeometry {
    int n_views = 0;
    std::vector<double> angles_deg;  // strictly increasing, in [0, 360)
    double sod_mm = 0.0;
    double sdd_mm = 0.0;
    int det_rows = 0;
    int det_cols = 0;
    double pixel_pitch_mm = 0.0;
    double volume_extent_mm = 0.0;  // cube half-extent about the isocenter

    void validate() const;  // throws InvalidArgumentError naming the constraint
};

ScanGeometry make_circular_geometry(int n_views, double sod_mm, double sdd_mm,
                                    int det_rows, int det_cols,
                                    double pixel_pitch_mm,
                                    double volume_extent_mm);

// Source position / detector frame for an arbitrary (possibly non-tabulated)
// view angle.
Vec3 source_position(const ScanGeometry& geom, double theta_deg);

// Ray through the center of pixel (u = column, v = row) at a continuous view
// angle. Used for synthesized views as well as tabulated ones.
Ray ray_at_angle(const ScanGeometry& geom, double theta_deg, int u, int v);

// Bounds-checked variant addressing a tabulated view.
Ray ray_for_pixel(const ScanGeometry& geom, int view_index, int u, int v);

// Entry/exit parameters of a ray against the cube [-extent, extent]^3 via the
// slab method, restricted to t >= 0. Zero-length chords count as misses.
std::optional<std::pair<double, double>> ray_entry_exit(const Ray& ray,
                                                        double extent_mm);

// Same for a general axis-aligned box [lo, hi].
std::optional<std::pair<double, double>> ray_box_entry_exit(const Ray& ray,
                                                            const Vec3& lo,
                                                            const Vec3& hi);

// Midpoint-rule samples over [t0, t1]: t_i = t0 + (i - 1/2) * dt. When
// `offsets` is non-null it must hold n values in [0, 1) replacing the fixed
// 1/2 (stratified jitter during training).
std::vector<SamplePoint> sample_ray(const Ray& ray, double t0_mm, double t1_mm,
                                    int n_samples,
                                    const double* offsets = nullptr);

}  // namespace diffnaf
