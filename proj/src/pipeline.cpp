#include "diffnaf/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "diffnaf/errors.hpp"
#include "diffnaf/projector.hpp"
#include "diffnaf/rng.hpp"

namespace diffnaf {

ReuseStrategy reuse_strategy_from_string(const std::string& s) {
    if (s == "none") return ReuseStrategy::none;
    if (s == "minmax-roundtrip") return ReuseStrategy::minmax_roundtrip;
    if (s == "drat") return ReuseStrategy::drat;
    throw InvalidArgumentError("unknown reuse strategy: " + s);
}

std::string to_string(ReuseStrategy s) {
    switch (s) {
        case ReuseStrategy::none: return "none";
        case ReuseStrategy::minmax_roundtrip: return "minmax-roundtrip";
        case ReuseStrategy::drat: return "drat";
    }
    return "?";
}

void PipelineConfig::validate() const {
    if (K < 0) throw InvalidArgumentError("PipelineConfig: K must be >= 0");
    bool ok = ratio == 0.25 || ratio == 0.5 || ratio == 1.0 || ratio == 2.0;
    if (!ok)
        throw InvalidArgumentError("PipelineConfig: ratio must be one of 1/4, 1/2, 1, 2");
    field.validate();
    train.validate();
    if (refiner.T < 1) throw InvalidArgumentError("PipelineConfig: refiner.T must be >= 1");
}

ProjectionSet merge_pseudo_labels(const ProjectionSet& current,
                                  const std::vector<ProjectionImage>& refined,
                                  double w1, double w2) {
    ProjectionSet out = current;
    for (const ProjectionImage& im : refined) {
        for (const auto& existing : out.images)
            if (existing.angle_deg == im.angle_deg)
                throw InvalidArgumentError("merge_pseudo_labels: duplicate angle " +
                                           std::to_string(im.angle_deg));
        out.images.push_back(im);
        out.images.back().provenance = Provenance::pseudo;
    }
    for (auto& im : out.images)
        im.weight = (im.provenance == Provenance::real) ? w1 : w2;
    std::sort(out.images.begin(), out.images.end(),
              [](const ProjectionImage& a, const ProjectionImage& b) {
                  return a.angle_deg < b.angle_deg;
              });
    out.validate();
    return out;
}

namespace {

double rms_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double se = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        se += d * d;
    }
    return std::sqrt(se / static_cast<double>(a.size()));
}

void record_metrics(IterationReport& rep, const VolumeGrid* gt,
                    const FieldParams& params, const PipelineConfig& cfg,
                    double extent) {
    if (!gt) {
        rep.psnr_db = std::numeric_limits<double>::quiet_NaN();
        rep.ssim = std::numeric_limits<double>::quiet_NaN();
        return;
    }
    VolumeGrid rendered = render_volume(params, cfg.field, extent, gt->dims, gt->voxel_mm);
    rep.psnr_db = psnr(*gt, rendered);
    rep.ssim = ssim(*gt, rendered);
}

}  // namespace

PipelineResult run_diffnaf(const VolumeGrid* ground_truth,
                           const ProjectionSet& initial_projs,
                           const PipelineConfig& config,
                           const DenoiserParams* denoiser,
                           const IterationObserver& observer) {
    config.validate();
    initial_projs.validate();
    if (config.oracle_refiner && !ground_truth)
        throw InvalidArgumentError("run_diffnaf: oracle refiner needs a ground-truth volume");
    if (!config.oracle_refiner && config.reuse != ReuseStrategy::none && config.K > 0 &&
        !denoiser)
        throw InvalidArgumentError("run_diffnaf: reuse strategy needs a trained denoiser");

    const ScanGeometry& geom = initial_projs.geometry;
    const double extent = geom.volume_extent_mm;
    DiffusionSchedule schedule = make_schedule(config.refiner.T);

    ProjectionSet projs = initial_projs;
    for (auto& im : projs.images)
        im.weight = (im.provenance == Provenance::real) ? config.train.w1 : config.train.w2;

    PipelineResult result;
    result.reports.reserve(static_cast<size_t>(config.K) + 1);

    // Iteration 0: plain training on the initial (real) set.
    auto t_start = std::chrono::steady_clock::now();
    TrainResultT<float> tr = train_field<float>(projs, config.field, config.train);
    result.field = tr.params;
    {
        IterationReport rep;
        rep.k = 0;
        rep.n_projections = static_cast<int>(projs.images.size());
        rep.final_train_loss = tr.losses.empty() ? 0.0 : tr.losses.back();
        record_metrics(rep, ground_truth, result.field, config, extent);
        rep.wall_seconds = std::chrono::duration<double>(
                               std::chrono::steady_clock::now() - t_start)
                               .count();
        result.reports.push_back(std::move(rep));
    }
    if (observer) observer(0, result.field, projs);

    for (int k = 1; k <= config.K; ++k) {
        auto t_iter = std::chrono::steady_clock::now();
        IterationReport rep;
        rep.k = k;

        std::vector<SelectedView> selected = select_views_for_ratio(
            result.field, config.field, geom, projs.angles(), config.selection,
            config.ratio);

        std::vector<ProjectionImage> raw;
        raw.reserve(selected.size());
        for (const SelectedView& sv : selected) {
            raw.push_back(synthesize_projection(result.field, config.field, geom,
                                                sv.theta_deg, config.selection.n_samples,
                                                config.train.w2));
            rep.added_angles.push_back(sv.theta_deg);
        }

        std::vector<ProjectionImage> refined;
        refined.reserve(raw.size());
        if (config.oracle_refiner) {
            for (const auto& r : raw) {
                ProjectionImage gt_img = project_image(*ground_truth, geom, r.angle_deg,
                                                       config.forward_n_samples);
                gt_img.provenance = Provenance::pseudo;
                gt_img.weight = config.train.w2;
                refined.push_back(std::move(gt_img));
            }
        } else if (config.reuse == ReuseStrategy::none || config.K == 0) {
            refined = raw;
        } else if (config.reuse == ReuseStrategy::drat) {
            DenoiserFn fn = make_denoiser_fn(*denoiser, geom.det_rows, geom.det_cols);
            for (size_t i = 0; i < raw.size(); ++i) {
                uint64_t seed = hash_combine(config.refiner.refine_seed,
                                             hash_combine(static_cast<uint64_t>(k), i));
                refined.push_back(refine_projection(raw[i], fn, schedule, seed,
                                                    config.refiner.add_noise));
            }
        } else {  // minmax-roundtrip: one shared affine range for the batch
            DenoiserFn fn = make_denoiser_fn(*denoiser, geom.det_rows, geom.det_cols);
            double mn = raw[0].pixels[0], mx = raw[0].pixels[0];
            for (const auto& r : raw)
                for (double v : r.pixels) {
                    mn = std::min(mn, v);
                    mx = std::max(mx, v);
                }
            double span = mx - mn;
            double gamma = span > 0.0 ? 1.0 / span : 1.0;
            double b = -gamma * mn;
            for (size_t i = 0; i < raw.size(); ++i) {
                uint64_t seed = hash_combine(config.refiner.refine_seed,
                                             hash_combine(static_cast<uint64_t>(k), i));
                refined.push_back(refine_projection_fixed_scale(
                    raw[i], gamma, b, fn, schedule, seed, config.refiner.add_noise));
            }
        }

        for (size_t i = 0; i < raw.size(); ++i)
            rep.refinement_deltas.push_back(rms_diff(refined[i].pixels, raw[i].pixels));

        projs = merge_pseudo_labels(projs, refined, config.train.w1, config.train.w2);

        TrainConfig iter_cfg = config.train;
        iter_cfg.rng_seed = hash_combine(config.train.rng_seed, static_cast<uint64_t>(k));
        TrainResultT<float> tk =
            train_field<float>(projs, config.field, iter_cfg, &result.field);
        result.field = tk.params;

        rep.n_projections = static_cast<int>(projs.images.size());
        rep.final_train_loss = tk.losses.empty() ? 0.0 : tk.losses.back();
        record_metrics(rep, ground_truth, result.field, config, extent);
        rep.wall_seconds = std::chrono::duration<double>(
                               std::chrono::steady_clock::now() - t_iter)
                               .count();
        result.reports.push_back(std::move(rep));
        if (observer) observer(k, result.field, projs);
    }

    std::array<int, 3> dims = ground_truth ? ground_truth->dims : config.render_dims;
    double voxel = ground_truth ? ground_truth->voxel_mm : config.render_voxel_mm;
    result.volume = render_volume(result.field, config.field, extent, dims, voxel);
    return result;
}

std::vector<AblationRow> ablation_matrix(const VolumeGrid& ground_truth,
                                         const ProjectionSet& initial_projs,
                                         const PipelineConfig& base,
                                         const std::vector<ReuseStrategy>& strategies,
                                         const std::vector<double>& ratios,
                                         const std::vector<int>& ks,
                                         const DenoiserParams* denoiser) {
    if (strategies.empty() || ratios.empty() || ks.empty())
        throw InvalidArgumentError("ablation_matrix: empty grid axis");
    int max_k = *std::max_element(ks.begin(), ks.end());
    std::vector<AblationRow> rows;
    for (ReuseStrategy strat : strategies) {
        for (double ratio : ratios) {
            PipelineConfig cfg = base;
            cfg.reuse = strat;
            cfg.ratio = ratio;
            cfg.K = max_k;
            PipelineResult res =
                run_diffnaf(&ground_truth, initial_projs, cfg, denoiser);
            for (int k : ks) {
                const IterationReport& rep = res.reports.at(static_cast<size_t>(k));
                rows.push_back({to_string(strat), ratio, k, rep.psnr_db, rep.ssim});
            }
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Refiner corpus
// ---------------------------------------------------------------------------

namespace {

std::vector<double> gaussian_blur(const std::vector<double>& img, int rows, int cols,
                                  double sigma) {
    int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        double v = std::exp(-0.5 * (i / sigma) * (i / sigma));
        kernel[static_cast<size_t>(i + radius)] = v;
        sum += v;
    }
    for (auto& v : kernel) v /= sum;

    std::vector<double> tmp(img.size(), 0.0), out(img.size(), 0.0);
    for (int y = 0; y < rows; ++y)
        for (int x = 0; x < cols; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                int xx = std::clamp(x + i, 0, cols - 1);
                acc += kernel[static_cast<size_t>(i + radius)] *
                       img[static_cast<size_t>(y) * cols + xx];
            }
            tmp[static_cast<size_t>(y) * cols + x] = acc;
        }
    for (int y = 0; y < rows; ++y)
        for (int x = 0; x < cols; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                int yy = std::clamp(y + i, 0, rows - 1);
                acc += kernel[static_cast<size_t>(i + radius)] *
                       tmp[static_cast<size_t>(yy) * cols + x];
            }
            out[static_cast<size_t>(y) * cols + x] = acc;
        }
    return out;
}

// Scale both members of a pair by the degraded image's range (the transform
// the refiner sees at deployment time).
ProjectionPair normalize_pair(std::vector<double> clean, std::vector<double> degraded) {
    DratParams d = estimate_drat(degraded);
    ProjectionPair out;
    out.degraded = drat_apply(degraded, d);
    out.clean = drat_apply(clean, d);
    return out;
}

}  // namespace

RefinerCorpus build_refiner_corpus(const VolumeGrid& ground_truth,
                                   const ScanGeometry& geom,
                                   const FieldConfig& field_config,
                                   const TrainConfig& train_config,
                                   const CorpusConfig& corpus) {
    if (corpus.n_clean_views < 2)
        throw InvalidArgumentError("build_refiner_corpus: n_clean_views must be >= 2");
    RefinerCorpus out;
    out.rows = geom.det_rows;
    out.cols = geom.det_cols;

    // Weak field fitted on a sparse view subset; its renderings carry the
    // artifact distribution the refiner must correct.
    std::vector<double> sparse_angles(static_cast<size_t>(corpus.undertrain_views));
    for (int i = 0; i < corpus.undertrain_views; ++i)
        sparse_angles[static_cast<size_t>(i)] = i * 360.0 / corpus.undertrain_views;
    ProjectionSet sparse =
        forward_project(ground_truth, geom, sparse_angles, corpus.n_samples);
    TrainConfig weak_cfg = train_config;
    weak_cfg.steps_per_outer_iter = corpus.undertrain_steps;
    weak_cfg.rng_seed = hash_combine(corpus.seed, 0x7765616b);
    TrainResultT<float> weak = train_field<float>(sparse, field_config, weak_cfg);

    Rng rng(hash_combine(corpus.seed, 0x636f7270));
    for (int i = 0; i < corpus.n_clean_views; ++i) {
        double angle = i * 360.0 / corpus.n_clean_views;
        ProjectionImage clean =
            project_image(ground_truth, geom, angle, corpus.n_samples);
        ProjectionImage synth =
            synthesize_projection(weak.params, field_config, geom, angle,
                                  train_config.samples_per_ray, 1.0);

        bool holdout = corpus.holdout_every > 0 && (i % corpus.holdout_every == 0);
        auto& dst = holdout ? out.holdout_pairs : out.train_pairs;
        dst.push_back(normalize_pair(clean.pixels, synth.pixels));

        // Parametric augmentation of the clean image.
        double sigma = rng.next_uniform(corpus.blur_sigma_lo, corpus.blur_sigma_hi);
        double frac = rng.next_uniform(corpus.noise_frac_lo, corpus.noise_frac_hi);
        std::vector<double> degraded =
            gaussian_blur(clean.pixels, geom.det_rows, geom.det_cols, sigma);
        double mn = clean.pixels[0], mx = clean.pixels[0];
        for (double v : clean.pixels) {
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
        double noise_sigma = frac * std::max(mx - mn, 1e-12);
        for (auto& v : degraded) v += noise_sigma * rng.next_normal();
        dst.push_back(normalize_pair(clean.pixels, std::move(degraded)));
    }
    return out;
}

}  // namespace diffnaf
