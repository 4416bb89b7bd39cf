#include "diffnaf/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "diffnaf/errors.hpp"

namespace diffnaf {

namespace {

ProjectionImage synthesize_impl(const FieldParams& params, const FieldConfig& config,
                                const ScanGeometry& geom, double theta_deg,
                                int n_samples, double weight, bool parallel) {
    ProjectionImage img;
    img.angle_deg = theta_deg;
    img.rows = geom.det_rows;
    img.cols = geom.det_cols;
    img.pixels.assign(img.n_pixels(), 0.0);
    img.provenance = Provenance::pseudo;
    img.weight = weight;
    const double extent = geom.volume_extent_mm;

    #pragma omp parallel for schedule(static) if (parallel)
    for (int v = 0; v < geom.det_rows; ++v) {
        for (int u = 0; u < geom.det_cols; ++u) {
            Ray ray = ray_at_angle(geom, theta_deg, u, v);
            img.at(v, u) = predict_ray_integral(params, config, extent, ray, n_samples);
        }
    }
    return img;
}

}  // namespace

ProjectionImage synthesize_projection(const FieldParams& params,
                                      const FieldConfig& config,
                                      const ScanGeometry& geom, double theta_deg,
                                      int n_samples, double weight) {
    return synthesize_impl(params, config, geom, theta_deg, n_samples, weight, true);
}

ProjectionImage synthesize_projection_serial(const FieldParams& params,
                                             const FieldConfig& config,
                                             const ScanGeometry& geom,
                                             double theta_deg, int n_samples,
                                             double weight) {
    return synthesize_impl(params, config, geom, theta_deg, n_samples, weight, false);
}

AngleInterval candidate_interval(double theta_i_deg, double theta_next_deg, double a) {
    if (!(theta_next_deg > theta_i_deg))
        throw InvalidArgumentError("candidate_interval: degenerate gap (theta_next <= theta_i)");
    if (!(a > 2.0))
        throw InvalidArgumentError("candidate_interval: divisor a must be > 2");
    double mid = 0.5 * (theta_i_deg + theta_next_deg);
    double gap = theta_next_deg - theta_i_deg;
    AngleInterval r;
    r.lo_deg = mid - gap / a;
    r.hi_deg = mid + gap / a;
    r.parent_lo_deg = theta_i_deg;
    r.parent_hi_deg = theta_next_deg;
    return r;
}

namespace {

// Spatial gradient: central differences inside, one-sided at the borders.
void image_gradient(const ProjectionImage& p, std::vector<double>& gx,
                    std::vector<double>& gy) {
    int rows = p.rows, cols = p.cols;
    gx.assign(p.n_pixels(), 0.0);
    gy.assign(p.n_pixels(), 0.0);
    for (int v = 0; v < rows; ++v) {
        for (int u = 0; u < cols; ++u) {
            size_t i = static_cast<size_t>(v) * cols + u;
            if (cols > 1) {
                if (u == 0)
                    gx[i] = p.at(v, 1) - p.at(v, 0);
                else if (u == cols - 1)
                    gx[i] = p.at(v, cols - 1) - p.at(v, cols - 2);
                else
                    gx[i] = 0.5 * (p.at(v, u + 1) - p.at(v, u - 1));
            }
            if (rows > 1) {
                if (v == 0)
                    gy[i] = p.at(1, u) - p.at(0, u);
                else if (v == rows - 1)
                    gy[i] = p.at(rows - 1, u) - p.at(rows - 2, u);
                else
                    gy[i] = 0.5 * (p.at(v + 1, u) - p.at(v - 1, u));
            }
        }
    }
}

}  // namespace

double gradient_dissimilarity(const ProjectionImage& candidate,
                              const ProjectionImage& left,
                              const ProjectionImage& right) {
    if (candidate.rows != left.rows || candidate.cols != left.cols ||
        candidate.rows != right.rows || candidate.cols != right.cols)
        throw MismatchError("gradient_dissimilarity: image dimensions differ");
    std::vector<double> gx_c, gy_c, gx_l, gy_l, gx_r, gy_r;
    image_gradient(candidate, gx_c, gy_c);
    image_gradient(left, gx_l, gy_l);
    image_gradient(right, gx_r, gy_r);
    double acc = 0.0;
    size_t n = candidate.n_pixels();
    for (size_t i = 0; i < n; ++i) {
        double dx = gx_c[i] - 0.5 * (gx_l[i] + gx_r[i]);
        double dy = gy_c[i] - 0.5 * (gy_l[i] + gy_r[i]);
        acc += std::sqrt(dx * dx + dy * dy);
    }
    return acc / static_cast<double>(n);
}

namespace {

struct Gap {
    double lo = 0.0, hi = 0.0;  // hi may exceed 360 on the wrap-around gap
};

std::vector<Gap> cyclic_gaps(const std::vector<double>& known) {
    std::vector<Gap> gaps;
    for (size_t i = 0; i + 1 < known.size(); ++i)
        gaps.push_back({known[i], known[i + 1]});
    gaps.push_back({known.back(), known.front() + 360.0});
    return gaps;
}

// Candidate synthesis shares endpoint projections across gaps via an
// angle-keyed cache.
struct SynthCache {
    const FieldParams& params;
    const FieldConfig& config;
    const ScanGeometry& geom;
    int n_samples;
    std::map<double, ProjectionImage> cache;

    const ProjectionImage& get(double angle) {
        auto it = cache.find(angle);
        if (it != cache.end()) return it->second;
        auto [ins, ok] = cache.emplace(
            angle, synthesize_projection(params, config, geom, angle, n_samples, 1.0));
        return ins->second;
    }
};

SelectedView score_gap(SynthCache& sc, const Gap& gap, const ViewSelectionConfig& cfg) {
    AngleInterval interval = candidate_interval(gap.lo, gap.hi, cfg.interval_divisor_a);
    const ProjectionImage& p_left = sc.get(gap.lo);
    const ProjectionImage& p_right = sc.get(gap.hi);

    SelectedView best;
    best.interval = interval;
    bool have = false;
    int n = std::max(cfg.candidates_per_gap, 1);
    for (int c = 0; c < n; ++c) {
        double theta = (n == 1)
                           ? 0.5 * (interval.lo_deg + interval.hi_deg)
                           : interval.lo_deg +
                                 (interval.hi_deg - interval.lo_deg) * c / (n - 1);
        ProjectionImage cand = synthesize_projection(sc.params, sc.config, sc.geom,
                                                     theta, sc.n_samples, 1.0);
        double score = gradient_dissimilarity(cand, p_left, p_right);
        // strict > keeps ties on the smaller angle
        if (!have || score > best.score) {
            have = true;
            best.score = score;
            best.theta_deg = theta;
        }
    }
    best.theta_deg = std::fmod(best.theta_deg, 360.0);
    return best;
}

std::vector<double> sorted_known(const std::vector<double>& known_angles) {
    if (known_angles.size() < 2)
        throw InvalidArgumentError("select_views: needs at least 2 known angles");
    std::vector<double> known = known_angles;
    std::sort(known.begin(), known.end());
    for (size_t i = 0; i + 1 < known.size(); ++i)
        if (known[i] == known[i + 1])
            throw InvalidArgumentError("select_views: duplicate known angle");
    if (known.front() < 0.0 || known.back() >= 360.0)
        throw InvalidArgumentError("select_views: known angles must lie in [0, 360)");
    return known;
}

}  // namespace

std::vector<SelectedView> select_views_apgps(const FieldParams& params,
                                             const FieldConfig& config,
                                             const ScanGeometry& geom,
                                             const std::vector<double>& known_angles,
                                             const ViewSelectionConfig& cfg,
                                             int n_new_views) {
    if (cfg.candidates_per_gap < 1)
        throw InvalidArgumentError("select_views: candidates_per_gap must be >= 1");
    std::vector<double> known = sorted_known(known_angles);
    std::vector<Gap> gaps = cyclic_gaps(known);
    if (n_new_views < 1 || n_new_views > static_cast<int>(gaps.size()))
        throw InvalidArgumentError("select_views: n_new_views must be in [1, n_gaps]");

    // Widest gaps first; ties toward the smaller start angle.
    std::vector<size_t> order(gaps.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        double wa = gaps[a].hi - gaps[a].lo, wb = gaps[b].hi - gaps[b].lo;
        if (wa != wb) return wa > wb;
        return gaps[a].lo < gaps[b].lo;
    });
    order.resize(static_cast<size_t>(n_new_views));

    SynthCache sc{params, config, geom, cfg.n_samples, {}};
    std::vector<SelectedView> out;
    out.reserve(order.size());
    for (size_t gi : order) out.push_back(score_gap(sc, gaps[gi], cfg));
    std::sort(out.begin(), out.end(), [](const SelectedView& a, const SelectedView& b) {
        return a.theta_deg < b.theta_deg;
    });
    return out;
}

std::vector<SelectedView> select_views_for_ratio(const FieldParams& params,
                                                 const FieldConfig& config,
                                                 const ScanGeometry& geom,
                                                 const std::vector<double>& known_angles,
                                                 const ViewSelectionConfig& cfg,
                                                 double ratio) {
    std::vector<double> known = sorted_known(known_angles);
    std::vector<Gap> gaps = cyclic_gaps(known);
    if (ratio == 0.25 || ratio == 0.5 || ratio == 1.0) {
        int n = std::max(1, static_cast<int>(std::lround(ratio * gaps.size())));
        n = std::min(n, static_cast<int>(gaps.size()));
        return select_views_apgps(params, config, geom, known_angles, cfg, n);
    }
    if (ratio == 2.0) {
        // Two winners per gap, one from each disjoint half-gap interval.
        SynthCache sc{params, config, geom, cfg.n_samples, {}};
        std::vector<SelectedView> out;
        for (const Gap& g : gaps) {
            double mid = 0.5 * (g.lo + g.hi);
            out.push_back(score_gap(sc, {g.lo, mid}, cfg));
            out.push_back(score_gap(sc, {mid, g.hi}, cfg));
        }
        std::sort(out.begin(), out.end(),
                  [](const SelectedView& a, const SelectedView& b) {
                      return a.theta_deg < b.theta_deg;
                  });
        return out;
    }
    throw InvalidArgumentError("select_views_for_ratio: ratio must be in {1/4, 1/2, 1, 2}");
}

}  // namespace diffnaf
