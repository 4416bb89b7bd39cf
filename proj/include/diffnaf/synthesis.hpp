#pragma once

#include <vector>

#include "diffnaf/field.hpp"
#include "diffnaf/projection.hpp"

namespace diffnaf {

// Full DR projection at a novel angle, rendered from a trained field.
// provenance = pseudo; weight as given.
ProjectionImage synthesize_projection(const FieldParams& params,
                                      const FieldConfig& config,
                                      const ScanGeometry& geom, double theta_deg,
                                      int n_samples, double weight);

ProjectionImage synthesize_projection_serial(const FieldParams& params,
                                             const FieldConfig& config,
                                             const ScanGeometry& geom,
                                             double theta_deg, int n_samples,
                                             double weight);

// Candidate range between two known angles: midpoint +- gap/a. Requires
// a > 2 so the interval stays inside the open gap.
struct AngleInterval {
    double lo_deg = 0.0;
    double hi_deg = 0.0;
    double parent_lo_deg = 0.0;
    double parent_hi_deg = 0.0;
};

AngleInterval candidate_interval(double theta_i_deg, double theta_next_deg,
                                 double a);

// Mean over pixels of the 2-norm of the spatial-gradient difference between
// the candidate and the average of its two neighbors. Central differences in
// the interior, one-sided at the borders.
double gradient_dissimilarity(const ProjectionImage& candidate,
                              const ProjectionImage& left,
                              const ProjectionImage& right);

struct SelectedView {
    double theta_deg = 0.0;  // normalized into [0, 360)
    double score = 0.0;
    AngleInterval interval;
};

struct ViewSelectionConfig {
    int candidates_per_gap = 5;
    double interval_divisor_a = 4.0;
    int n_samples = 64;  // samples per ray during candidate synthesis
};

// Score every discretized candidate in each cyclic gap (including the
// wrap-around gap) against synthesized endpoint projections and return the
// per-gap argmax for the `n_new_views` widest gaps. Ties break toward the
// smaller angle. n_new_views <= number of gaps.
std::vector<SelectedView> select_views_apgps(const FieldParams& params,
                                             const FieldConfig& config,
                                             const ScanGeometry& geom,
                                             const std::vector<double>& known_angles,
                                             const ViewSelectionConfig& cfg,
                                             int n_new_views);

// Ratio-driven wrapper covering the studied regimes: r in {1/4, 1/2, 1}
// selects round(r * n_gaps) gaps (widest first); r = 2 picks two candidates
// per gap from the two disjoint half-gap intervals.
std::vector<SelectedView> select_views_for_ratio(const FieldParams& params,
                                                 const FieldConfig& config,
                                                 const ScanGeometry& geom,
                                                 const std::vector<double>& known_angles,
                                                 const ViewSelectionConfig& cfg,
                                                 double ratio);

}  // namespace diffnaf
