#pragma once

#include <vector>

#include "diffnaf/projection.hpp"
#include "diffnaf/volume.hpp"

namespace diffnaf {

// Forward-project one view at a continuous angle. Every pixel is the
// midpoint-rule line integral of the volume along its ray.
ProjectionImage project_image(const VolumeGrid& volume, const ScanGeometry& geom,
                              double angle_deg, int n_samples);

// Single-threaded reference implementation; bitwise identical output.
ProjectionImage project_image_serial(const VolumeGrid& volume,
                                     const ScanGeometry& geom, double angle_deg,
                                     int n_samples);

// Project all requested angles; provenance = real, weight = 1.
ProjectionSet forward_project(const VolumeGrid& volume, const ScanGeometry& geom,
                              const std::vector<double>& angles_deg,
                              int n_samples = 256);

struct SartOptions {
    int n_iters = 20;
    double relaxation = 0.5;
    int n_samples = 256;
    // optional: projection-domain RMSE recorded after every iteration
    std::vector<double>* rmse_trace = nullptr;
};

// Simultaneous algebraic reconstruction: sweeps views in angle order, adding
// the relaxed, chord- and coverage-normalized backprojection of the
// projection residuals. Output clamped to >= 0 at the end.
VolumeGrid sart_reconstruct(const ProjectionSet& projs, std::array<int, 3> dims,
                            double voxel_mm, const SartOptions& opts);

// Feldkamp cone-beam filtered backprojection: cosine weighting, row-wise
// ramp filtering (frequency domain, Ram-Lak), distance-weighted
// backprojection. Output clamped to >= 0.
VolumeGrid fdk_reconstruct(const ProjectionSet& projs, std::array<int, 3> dims,
                           double voxel_mm);

// Projection-domain RMSE between a set and the reprojection of a volume with
// the set's geometry (diagnostic for SART convergence).
double reprojection_rmse(const ProjectionSet& projs, const VolumeGrid& volume,
                         int n_samples = 256);

}  // namespace diffnaf
