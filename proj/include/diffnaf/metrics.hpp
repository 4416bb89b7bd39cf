#pragma once

#include "diffnaf/volume.hpp"

namespace diffnaf {

struct MetricReport {
    double psnr_db = 0.0;  // +inf sentinel when the volumes are identical
    double ssim = 0.0;
    double data_range = 0.0;
    std::array<int, 3> dims{0, 0, 0};
};

// 10 log10(range^2 / MSE). data_range <= 0 means "use max of the reference a".
double psnr(const VolumeGrid& a, const VolumeGrid& b, double data_range = 0.0);

// Mean local SSIM over all fully-contained 3D windows, uniform weighting.
double ssim(const VolumeGrid& a, const VolumeGrid& b, int window = 7,
            double k1 = 0.01, double k2 = 0.03, double data_range = 0.0);

MetricReport evaluate_volumes(const VolumeGrid& reference, const VolumeGrid& test,
                              double data_range = 0.0);

}  // namespace diffnaf
