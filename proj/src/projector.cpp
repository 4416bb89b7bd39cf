#include "diffnaf/projector.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <string>

#include "diffnaf/errors.hpp"
#include "diffnaf/parallel.hpp"
#include "diffnaf/phantom.hpp"

namespace diffnaf {

namespace {

ProjectionImage project_image_impl(const VolumeGrid& volume,
                                   const ScanGeometry& geom, double angle_deg,
                                   int n_samples, bool parallel) {
    ProjectionImage img;
    img.angle_deg = angle_deg;
    img.rows = geom.det_rows;
    img.cols = geom.det_cols;
    img.pixels.assign(img.n_pixels(), 0.0);
    img.provenance = Provenance::real;
    img.weight = 1.0;

    const int rows = geom.det_rows, cols = geom.det_cols;
    #pragma omp parallel for schedule(static) if (parallel)
    for (int v = 0; v < rows; ++v) {
        for (int u = 0; u < cols; ++u) {
            Ray ray = ray_at_angle(geom, angle_deg, u, v);
            img.at(v, u) = discrete_line_integral(volume, ray, n_samples);
        }
    }
    return img;
}

}  // namespace

ProjectionImage project_image(const VolumeGrid& volume, const ScanGeometry& geom,
                              double angle_deg, int n_samples) {
    return project_image_impl(volume, geom, angle_deg, n_samples, true);
}

ProjectionImage project_image_serial(const VolumeGrid& volume,
                                     const ScanGeometry& geom, double angle_deg,
                                     int n_samples) {
    return project_image_impl(volume, geom, angle_deg, n_samples, false);
}

ProjectionSet forward_project(const VolumeGrid& volume, const ScanGeometry& geom,
                              const std::vector<double>& angles_deg,
                              int n_samples) {
    geom.validate();
    double half_span = 0.5 * geom.volume_extent_mm * 2.0;
    double vol_half = 0.5 * std::max({volume.dims[0], volume.dims[1], volume.dims[2]}) *
                      volume.voxel_mm;
    if (std::abs(vol_half - geom.volume_extent_mm) > 1e-6 * half_span)
        throw MismatchError("forward_project: volume span inconsistent with geometry extent");

    ProjectionSet set;
    set.geometry = geom;
    set.images.reserve(angles_deg.size());
    for (double a : angles_deg)
        set.images.push_back(project_image(volume, geom, a, n_samples));
    std::sort(set.images.begin(), set.images.end(),
              [](const ProjectionImage& a, const ProjectionImage& b) {
                  return a.angle_deg < b.angle_deg;
              });
    set.validate();
    return set;
}

// ---------------------------------------------------------------------------
// SART
// ---------------------------------------------------------------------------

namespace {

// Scatter `amount * dt` through the trilinear weights of point p.
inline void scatter_trilinear(VolumeGrid& acc, const Vec3& p, double amount) {
    double gx = (p.x - acc.origin_mm.x) / acc.voxel_mm;
    double gy = (p.y - acc.origin_mm.y) / acc.voxel_mm;
    double gz = (p.z - acc.origin_mm.z) / acc.voxel_mm;
    int x0 = static_cast<int>(std::floor(gx));
    int y0 = static_cast<int>(std::floor(gy));
    int z0 = static_cast<int>(std::floor(gz));
    double fx = gx - x0, fy = gy - y0, fz = gz - z0;
    for (int dz = 0; dz < 2; ++dz) {
        int z = z0 + dz;
        if (z < 0 || z >= acc.dims[2]) continue;
        double wz = dz ? fz : 1.0 - fz;
        for (int dy = 0; dy < 2; ++dy) {
            int y = y0 + dy;
            if (y < 0 || y >= acc.dims[1]) continue;
            double wy = dy ? fy : 1.0 - fy;
            for (int dx = 0; dx < 2; ++dx) {
                int x = x0 + dx;
                if (x < 0 || x >= acc.dims[0]) continue;
                acc.at(x, y, z) += amount * wz * wy * (dx ? fx : 1.0 - fx);
            }
        }
    }
}

struct ViewRays {
    std::vector<Ray> rays;          // one per pixel, row-major
    std::vector<double> t0, t1;     // chord bounds; t1 <= t0 marks a miss
};

ViewRays build_view_rays(const ScanGeometry& geom, double angle_deg,
                         const VolumeGrid& vol) {
    ViewRays vr;
    size_t n = static_cast<size_t>(geom.det_rows) * geom.det_cols;
    vr.rays.resize(n);
    vr.t0.assign(n, 0.0);
    vr.t1.assign(n, -1.0);
    for (int v = 0; v < geom.det_rows; ++v) {
        for (int u = 0; u < geom.det_cols; ++u) {
            size_t i = static_cast<size_t>(v) * geom.det_cols + u;
            vr.rays[i] = ray_at_angle(geom, angle_deg, u, v);
            auto hit = ray_box_entry_exit(vr.rays[i], vol.center_span_lo(),
                                          vol.center_span_hi());
            if (hit) {
                vr.t0[i] = hit->first;
                vr.t1[i] = hit->second;
            }
        }
    }
    return vr;
}

// Deterministic slot-parallel scatter of per-ray values along rays.
void scatter_rays(const ViewRays& vr, const std::vector<double>& per_ray,
                  int n_samples, std::vector<VolumeGrid>& slot_acc,
                  VolumeGrid& out) {
    size_t n = vr.rays.size();
    #pragma omp parallel for schedule(dynamic, 1)
    for (int slot = 0; slot < kNumSlots; ++slot) {
        VolumeGrid& acc = slot_acc[static_cast<size_t>(slot)];
        std::fill(acc.values.begin(), acc.values.end(), 0.0);
        auto [lo, hi] = slot_range(n, slot);
        for (size_t i = lo; i < hi; ++i) {
            if (vr.t1[i] <= vr.t0[i] || per_ray[i] == 0.0) continue;
            double dt = (vr.t1[i] - vr.t0[i]) / n_samples;
            double amount = per_ray[i] * dt;
            for (int s = 0; s < n_samples; ++s) {
                double t = vr.t0[i] + (s + 0.5) * dt;
                scatter_trilinear(acc, vr.rays[i].origin_mm + t * vr.rays[i].direction,
                                  amount);
            }
        }
    }
    size_t nvox = out.n_voxels();
    #pragma omp parallel for schedule(static)
    for (long long j = 0; j < static_cast<long long>(nvox); ++j) {
        double s = 0.0;
        for (int slot = 0; slot < kNumSlots; ++slot)
            s += slot_acc[static_cast<size_t>(slot)].values[static_cast<size_t>(j)];
        out.values[static_cast<size_t>(j)] = s;
    }
}

}  // namespace

VolumeGrid sart_reconstruct(const ProjectionSet& projs, std::array<int, 3> dims,
                            double voxel_mm, const SartOptions& opts) {
    projs.validate();
    if (opts.n_iters < 1)
        throw InvalidArgumentError("sart_reconstruct: n_iters must be >= 1");
    if (!(opts.relaxation > 0.0 && opts.relaxation <= 1.0))
        throw InvalidArgumentError("sart_reconstruct: relaxation must be in (0, 1]");
    if (projs.images.empty())
        throw InvalidArgumentError("sart_reconstruct: empty projection set");

    VolumeGrid vol = VolumeGrid::centered(dims, voxel_mm);
    const size_t n_views = projs.images.size();
    const int n_samples = opts.n_samples;

    std::vector<VolumeGrid> slot_acc(kNumSlots, vol);
    VolumeGrid upd = vol;

    // Per-view rays and voxel coverage, precomputed once.
    std::vector<ViewRays> view_rays;
    view_rays.reserve(n_views);
    std::vector<std::vector<float>> coverage(n_views);
    std::vector<double> ones;
    for (size_t k = 0; k < n_views; ++k) {
        view_rays.push_back(build_view_rays(projs.geometry,
                                            projs.images[k].angle_deg, vol));
        ones.assign(view_rays[k].rays.size(), 1.0);
        scatter_rays(view_rays[k], ones, n_samples, slot_acc, upd);
        coverage[k].resize(upd.n_voxels());
        for (size_t j = 0; j < upd.n_voxels(); ++j)
            coverage[k][j] = static_cast<float>(upd.values[j]);
    }

    std::vector<double> resid;
    for (int iter = 0; iter < opts.n_iters; ++iter) {
        for (size_t k = 0; k < n_views; ++k) {
            const ViewRays& vr = view_rays[k];
            const ProjectionImage& meas = projs.images[k];
            size_t n_rays = vr.rays.size();
            resid.assign(n_rays, 0.0);

            // Reproject and normalize the residual by the chord length.
            #pragma omp parallel for schedule(static)
            for (long long i = 0; i < static_cast<long long>(n_rays); ++i) {
                size_t ii = static_cast<size_t>(i);
                if (vr.t1[ii] <= vr.t0[ii]) continue;
                double dt = (vr.t1[ii] - vr.t0[ii]) / n_samples;
                double pred = 0.0;
                for (int s = 0; s < n_samples; ++s) {
                    double t = vr.t0[ii] + (s + 0.5) * dt;
                    pred += vol.sample_trilinear(vr.rays[ii].origin_mm +
                                                 t * vr.rays[ii].direction);
                }
                pred *= dt;
                double chord = vr.t1[ii] - vr.t0[ii];
                resid[ii] = (meas.pixels[ii] - pred) / chord;
            }

            scatter_rays(vr, resid, n_samples, slot_acc, upd);

            size_t nvox = vol.n_voxels();
            #pragma omp parallel for schedule(static)
            for (long long j = 0; j < static_cast<long long>(nvox); ++j) {
                float cov = coverage[k][static_cast<size_t>(j)];
                if (cov > 1e-9f)
                    vol.values[static_cast<size_t>(j)] +=
                        opts.relaxation * upd.values[static_cast<size_t>(j)] / cov;
            }
        }
        if (opts.rmse_trace)
            opts.rmse_trace->push_back(reprojection_rmse(projs, vol, n_samples));
    }

    for (double& v : vol.values) v = std::max(v, 0.0);
    vol.require_finite("sart_reconstruct output");
    return vol;
}

// ---------------------------------------------------------------------------
// FDK
// ---------------------------------------------------------------------------

namespace {

// Iterative radix-2 complex FFT; n must be a power of two.
void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
    size_t n = a.size();
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        double ang = (inverse ? 2.0 : -2.0) * 3.14159265358979323846 / len;
        std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t k = 0; k < len / 2; ++k) {
                std::complex<double> even = a[i + k];
                std::complex<double> odd = a[i + k + len / 2] * w;
                a[i + k] = even + odd;
                a[i + k + len / 2] = even - odd;
                w *= wl;
            }
        }
    }
    if (inverse)
        for (auto& x : a) x /= static_cast<double>(n);
}

size_t next_pow2(size_t n) {
    size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

}  // namespace

VolumeGrid fdk_reconstruct(const ProjectionSet& projs, std::array<int, 3> dims,
                           double voxel_mm) {
    projs.validate();
    if (projs.images.size() < 2)
        throw InvalidArgumentError("fdk_reconstruct: needs at least 2 views");

    const ScanGeometry& g = projs.geometry;
    const int rows = g.det_rows, cols = g.det_cols;
    const double mag = g.sod_mm / g.sdd_mm;          // detector -> isocenter plane
    const double tau = g.pixel_pitch_mm * mag;       // sample spacing at isocenter
    const size_t n_views = projs.images.size();

    // Ram-Lak kernel, sampled form (already carries the fan-beam 1/2):
    // g(0) = 1/(8 tau^2), g(odd n) = -1/(2 pi^2 n^2 tau^2), g(even n) = 0.
    const size_t nfft = next_pow2(static_cast<size_t>(2 * cols));
    std::vector<std::complex<double>> kernel(nfft, 0.0);
    kernel[0] = 1.0 / (8.0 * tau * tau);
    for (size_t n = 1; n < nfft / 2 + 1; ++n) {
        double val = (n % 2 == 1)
                         ? -1.0 / (2.0 * 3.14159265358979323846 *
                                   3.14159265358979323846 * n * n * tau * tau)
                         : 0.0;
        kernel[n] = val;
        kernel[nfft - n] = val;  // even kernel, wrapped layout
    }
    fft_inplace(kernel, false);

    // Cosine weighting + row-wise ramp filtering of every view.
    std::vector<std::vector<double>> filtered(n_views);
    for (size_t k = 0; k < n_views; ++k) {
        filtered[k].assign(static_cast<size_t>(rows) * cols, 0.0);
        const ProjectionImage& im = projs.images[k];
        #pragma omp parallel for schedule(static)
        for (int v = 0; v < rows; ++v) {
            std::vector<std::complex<double>> row(nfft, 0.0);
            double b = (v - (rows - 1) * 0.5) * tau;
            for (int u = 0; u < cols; ++u) {
                double a = (u - (cols - 1) * 0.5) * tau;
                double w = g.sod_mm /
                           std::sqrt(g.sod_mm * g.sod_mm + a * a + b * b);
                row[static_cast<size_t>(u)] = im.at(v, u) * w;
            }
            fft_inplace(row, false);
            for (size_t i = 0; i < nfft; ++i) row[i] *= kernel[i];
            fft_inplace(row, true);
            for (int u = 0; u < cols; ++u)
                filtered[k][static_cast<size_t>(v) * cols + u] =
                    tau * row[static_cast<size_t>(u)].real();
        }
    }

    // Per-view angular weight (cyclic neighbor gap / 2); uniform -> 2pi/n.
    std::vector<double> dbeta(n_views);
    for (size_t k = 0; k < n_views; ++k) {
        double prev = projs.images[(k + n_views - 1) % n_views].angle_deg;
        double next = projs.images[(k + 1) % n_views].angle_deg;
        double gap = std::fmod(next - prev + 720.0, 360.0);
        if (n_views == 2) gap = 360.0;  // degenerate cycle
        dbeta[k] = 0.5 * gap * 0.017453292519943295;
    }

    std::vector<double> cosb(n_views), sinb(n_views);
    for (size_t k = 0; k < n_views; ++k) {
        double th = projs.images[k].angle_deg * 0.017453292519943295;
        cosb[k] = std::cos(th);
        sinb[k] = std::sin(th);
    }

    VolumeGrid vol = VolumeGrid::centered(dims, voxel_mm);
    const double sod = g.sod_mm;
    #pragma omp parallel for schedule(static)
    for (int z = 0; z < dims[2]; ++z) {
        for (int y = 0; y < dims[1]; ++y) {
            for (int x = 0; x < dims[0]; ++x) {
                Vec3 p = vol.voxel_center(x, y, z);
                double acc = 0.0;
                for (size_t k = 0; k < n_views; ++k) {
                    double d = sod - (p.x * cosb[k] + p.y * sinb[k]);
                    if (d < 1e-6) continue;
                    double a = sod * (-p.x * sinb[k] + p.y * cosb[k]) / d;
                    double b = sod * p.z / d;
                    double pu = a / tau + (cols - 1) * 0.5;
                    double pv = b / tau + (rows - 1) * 0.5;
                    int u0 = static_cast<int>(std::floor(pu));
                    int v0 = static_cast<int>(std::floor(pv));
                    if (u0 < 0 || u0 + 1 >= cols || v0 < 0 || v0 + 1 >= rows)
                        continue;
                    double fu = pu - u0, fv = pv - v0;
                    const std::vector<double>& q = filtered[k];
                    auto qat = [&](int vv, int uu) {
                        return q[static_cast<size_t>(vv) * cols + uu];
                    };
                    double interp = (1 - fv) * ((1 - fu) * qat(v0, u0) +
                                                fu * qat(v0, u0 + 1)) +
                                    fv * ((1 - fu) * qat(v0 + 1, u0) +
                                          fu * qat(v0 + 1, u0 + 1));
                    acc += dbeta[k] * (sod * sod) / (d * d) * interp;
                }
                vol.at(x, y, z) = std::max(acc, 0.0);
            }
        }
    }
    vol.require_finite("fdk_reconstruct output");
    return vol;
}

double reprojection_rmse(const ProjectionSet& projs, const VolumeGrid& volume,
                         int n_samples) {
    double se = 0.0;
    size_t n = 0;
    for (const auto& im : projs.images) {
        ProjectionImage re = project_image(volume, projs.geometry, im.angle_deg,
                                           n_samples);
        for (size_t i = 0; i < im.pixels.size(); ++i) {
            double d = im.pixels[i] - re.pixels[i];
            se += d * d;
        }
        n += im.pixels.size();
    }
    return std::sqrt(se / static_cast<double>(n));
}

}  // namespace diffnaf
