#include "diffnaf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "diffnaf/errors.hpp"

namespace diffnaf {

namespace {

double range_or_max(const VolumeGrid& reference, double data_range) {
    if (data_range > 0.0) return data_range;
    double mx = 0.0;
    for (double v : reference.values) mx = std::max(mx, v);
    if (!(mx > 0.0))
        throw InvalidArgumentError("metrics: data_range must be > 0 (reference max is 0)");
    return mx;
}

void check_dims(const VolumeGrid& a, const VolumeGrid& b) {
    if (a.dims != b.dims)
        throw MismatchError("metrics: volume dimensions differ");
}

}  // namespace

double psnr(const VolumeGrid& a, const VolumeGrid& b, double data_range) {
    check_dims(a, b);
    double range = range_or_max(a, data_range);
    size_t n = a.n_voxels();

    // Per-slice partial sums combined in slice order keep the reduction
    // deterministic for any thread count.
    int nz = a.dims[2];
    size_t slice = static_cast<size_t>(a.dims[0]) * a.dims[1];
    std::vector<double> partial(static_cast<size_t>(nz), 0.0);
    #pragma omp parallel for schedule(static)
    for (int z = 0; z < nz; ++z) {
        double s = 0.0;
        for (size_t i = slice * z; i < slice * (z + 1); ++i) {
            double d = a.values[i] - b.values[i];
            s += d * d;
        }
        partial[static_cast<size_t>(z)] = s;
    }
    double se = 0.0;
    for (double p : partial) se += p;
    double mse = se / static_cast<double>(n);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(range * range / mse);
}

double ssim(const VolumeGrid& a, const VolumeGrid& b, int window, double k1,
            double k2, double data_range) {
    check_dims(a, b);
    if (window < 1 || a.dims[0] < window || a.dims[1] < window || a.dims[2] < window)
        throw InvalidArgumentError("ssim: volume smaller than the window per axis");
    double range = range_or_max(a, data_range);
    double c1 = (k1 * range) * (k1 * range);
    double c2 = (k2 * range) * (k2 * range);

    int nx = a.dims[0] - window + 1;
    int ny = a.dims[1] - window + 1;
    int nz = a.dims[2] - window + 1;
    double inv_n = 1.0 / (static_cast<double>(window) * window * window);

    std::vector<double> partial(static_cast<size_t>(nz), 0.0);
    #pragma omp parallel for schedule(static)
    for (int z = 0; z < nz; ++z) {
        double acc = 0.0;
        for (int y = 0; y < ny; ++y) {
            for (int x = 0; x < nx; ++x) {
                double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                for (int dz = 0; dz < window; ++dz)
                    for (int dy = 0; dy < window; ++dy)
                        for (int dx = 0; dx < window; ++dx) {
                            double va = a.at(x + dx, y + dy, z + dz);
                            double vb = b.at(x + dx, y + dy, z + dz);
                            sa += va;
                            sb += vb;
                            saa += va * va;
                            sbb += vb * vb;
                            sab += va * vb;
                        }
                double ma = sa * inv_n, mb = sb * inv_n;
                double va = saa * inv_n - ma * ma;
                double vb = sbb * inv_n - mb * mb;
                double cov = sab * inv_n - ma * mb;
                acc += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                       ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        partial[static_cast<size_t>(z)] = acc;
    }
    double total = 0.0;
    for (double p : partial) total += p;
    return total / (static_cast<double>(nx) * ny * nz);
}

MetricReport evaluate_volumes(const VolumeGrid& reference, const VolumeGrid& test,
                              double data_range) {
    MetricReport r;
    r.data_range = range_or_max(reference, data_range);
    r.psnr_db = psnr(reference, test, r.data_range);
    r.ssim = ssim(reference, test, 7, 0.01, 0.03, r.data_range);
    r.dims = reference.dims;
    return r;
}

}  // namespace diffnaf
