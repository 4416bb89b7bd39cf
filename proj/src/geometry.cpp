#include "diffnaf/geometry.hpp"

#include <algorithm>
#include <limits>
#include <string>

#include "diffnaf/errors.hpp"

namespace diffnaf {

namespace {
constexpr double kDegToRad = 0.017453292519943295;
}

void ScanGeometry::validate() const {
    if (n_views < 1)
        throw InvalidArgumentError("invalid geometry: n_views must be >= 1");
    if (static_cast<int>(angles_deg.size()) != n_views)
        throw InvalidArgumentError("invalid geometry: angles_deg size != n_views");
    if (!(sod_mm > 0.0))
        throw InvalidArgumentError("invalid geometry: sod_mm must be > 0");
    if (!(sod_mm < sdd_mm))
        throw InvalidArgumentError("invalid geometry: requires 0 < sod_mm < sdd_mm");
    if (det_rows < 1 || det_cols < 1)
        throw InvalidArgumentError("invalid geometry: det_rows and det_cols must be >= 1");
    if (!(pixel_pitch_mm > 0.0))
        throw InvalidArgumentError("invalid geometry: pixel_pitch_mm must be > 0");
    if (!(volume_extent_mm > 0.0))
        throw InvalidArgumentError("invalid geometry: volume_extent_mm must be > 0");
    for (int i = 0; i < n_views; ++i) {
        double a = angles_deg[i];
        if (!(a >= 0.0 && a < 360.0))
            throw InvalidArgumentError("invalid geometry: angle " + std::to_string(a) +
                                       " outside [0, 360)");
        if (i > 0 && !(angles_deg[i - 1] < a))
            throw InvalidArgumentError("invalid geometry: angles must be strictly increasing");
    }
}

ScanGeometry make_circular_geometry(int n_views, double sod_mm, double sdd_mm,
                                    int det_rows, int det_cols,
                                    double pixel_pitch_mm,
                                    double volume_extent_mm) {
    ScanGeometry g;
    g.n_views = n_views;
    g.sod_mm = sod_mm;
    g.sdd_mm = sdd_mm;
    g.det_rows = det_rows;
    g.det_cols = det_cols;
    g.pixel_pitch_mm = pixel_pitch_mm;
    g.volume_extent_mm = volume_extent_mm;
    g.angles_deg.resize(std::max(n_views, 0));
    for (int k = 0; k < n_views; ++k) g.angles_deg[k] = k * 360.0 / n_views;
    g.validate();
    return g;
}

Vec3 source_position(const ScanGeometry& geom, double theta_deg) {
    double th = theta_deg * kDegToRad;
    return {geom.sod_mm * std::cos(th), geom.sod_mm * std::sin(th), 0.0};
}

Ray ray_at_angle(const ScanGeometry& geom, double theta_deg, int u, int v) {
    if (u < 0 || u >= geom.det_cols || v < 0 || v >= geom.det_rows)
        throw InvalidArgumentError("detector index out of bounds: (u=" +
                                   std::to_string(u) + ", v=" + std::to_string(v) + ")");
    double th = theta_deg * kDegToRad;
    double c = std::cos(th), s = std::sin(th);
    Vec3 axis{c, s, 0.0};                 // isocenter -> source
    Vec3 u_hat{-s, c, 0.0};               // detector column direction
    Vec3 v_hat{0.0, 0.0, 1.0};            // detector row direction
    Vec3 source = axis * geom.sod_mm;
    Vec3 det_center = axis * (geom.sod_mm - geom.sdd_mm);
    double du = (u - (geom.det_cols - 1) * 0.5) * geom.pixel_pitch_mm;
    double dv = (v - (geom.det_rows - 1) * 0.5) * geom.pixel_pitch_mm;
    Vec3 pixel = det_center + du * u_hat + dv * v_hat;
    return {source, (pixel - source).normalized()};
}

Ray ray_for_pixel(const ScanGeometry& geom, int view_index, int u, int v) {
    if (view_index < 0 || view_index >= geom.n_views)
        throw InvalidArgumentError("view_index out of bounds: " +
                                   std::to_string(view_index));
    return ray_at_angle(geom, geom.angles_deg[view_index], u, v);
}

std::optional<std::pair<double, double>> ray_box_entry_exit(const Ray& ray,
                                                            const Vec3& lo,
                                                            const Vec3& hi) {
    double t0 = 0.0;
    double t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        double o = ray.origin_mm[a], d = ray.direction[a];
        if (std::abs(d) < 1e-300) {
            // Parallel to this slab: tangent contact with a face is a miss.
            if (!(o > lo[a] && o < hi[a])) return std::nullopt;
            continue;
        }
        double inv = 1.0 / d;
        double ta = (lo[a] - o) * inv;
        double tb = (hi[a] - o) * inv;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        if (t0 >= t1) return std::nullopt;  // includes zero-length chords
    }
    return std::make_pair(t0, t1);
}

std::optional<std::pair<double, double>> ray_entry_exit(const Ray& ray,
                                                        double extent_mm) {
    if (!(extent_mm > 0.0))
        throw InvalidArgumentError("ray_entry_exit: extent_mm must be > 0");
    Vec3 lo{-extent_mm, -extent_mm, -extent_mm};
    Vec3 hi{extent_mm, extent_mm, extent_mm};
    return ray_box_entry_exit(ray, lo, hi);
}

std::vector<SamplePoint> sample_ray(const Ray& ray, double t0_mm, double t1_mm,
                                    int n_samples, const double* offsets) {
    if (!(t0_mm < t1_mm))
        throw InvalidArgumentError("sample_ray: empty interval (t0 >= t1)");
    if (n_samples < 1)
        throw InvalidArgumentError("sample_ray: n_samples must be >= 1");
    std::vector<SamplePoint> out(static_cast<size_t>(n_samples));
    double dt = (t1_mm - t0_mm) / n_samples;
    for (int i = 0; i < n_samples; ++i) {
        double off = offsets ? offsets[i] : 0.5;
        double t = t0_mm + (i + off) * dt;
        out[static_cast<size_t>(i)] = {ray.origin_mm + t * ray.direction, t, dt};
    }
    return out;
}

}  // namespace diffnaf
