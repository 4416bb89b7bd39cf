#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "diffnaf/diffusion.hpp"
#include "diffnaf/field.hpp"
#include "diffnaf/metrics.hpp"
#include "diffnaf/projection.hpp"
#include "diffnaf/synthesis.hpp"
#include "diffnaf/volume.hpp"

namespace diffnaf {

enum class ReuseStrategy { none, minmax_roundtrip, drat };

ReuseStrategy reuse_strategy_from_string(const std::string& s);
std::string to_string(ReuseStrategy s);

struct RefinerConfig {
    int T = 50;
    DenoiserConfig net;
    DenoiserTrainConfig train;
    bool add_noise = true;
    uint64_t refine_seed = 7;
};

struct PipelineConfig {
    int K = 3;
    double ratio = 1.0;  // one of {1/4, 1/2, 1, 2}
    ReuseStrategy reuse = ReuseStrategy::drat;
    bool oracle_refiner = false;  // pseudo-labels become true projections
    FieldConfig field;
    TrainConfig train;
    ViewSelectionConfig selection;
    RefinerConfig refiner;
    int forward_n_samples = 256;          // oracle-refiner projections
    std::array<int, 3> render_dims{64, 64, 64};  // used when no ground truth
    double render_voxel_mm = 4.0;

    void validate() const;
};

struct IterationReport {
    int k = 0;
    std::vector<double> added_angles;
    std::vector<double> refinement_deltas;  // RMS(refined - raw synthetic)
    double psnr_db = 0.0;                   // vs ground truth; NaN if unavailable
    double ssim = 0.0;
    double final_train_loss = 0.0;
    int n_projections = 0;
    double wall_seconds = 0.0;
};

struct PipelineResult {
    FieldParams field;
    VolumeGrid volume;
    std::vector<IterationReport> reports;  // one per k, including k = 0
};

// Union of the current set and the refined pseudo-labels, sorted by angle.
// Real images are stamped with w1, pseudo images with w2. Duplicate angles
// are an error.
ProjectionSet merge_pseudo_labels(const ProjectionSet& current,
                                  const std::vector<ProjectionImage>& refined,
                                  double w1, double w2);

// Observer invoked after every iteration (including k = 0) with the current
// field and training set; used by the CLI to write per-iteration artifacts.
using IterationObserver =
    std::function<void(int k, const FieldParams&, const ProjectionSet&)>;

// The full iterative loop: initial training on the given projections, then K
// rounds of select -> synthesize -> refine -> merge -> continue training.
// ground_truth enables per-iteration metrics and is required in
// oracle-refiner mode. denoiser is required for the drat / minmax strategies
// unless oracle_refiner is set.
PipelineResult run_diffnaf(const VolumeGrid* ground_truth,
                           const ProjectionSet& initial_projs,
                           const PipelineConfig& config,
                           const DenoiserParams* denoiser,
                           const IterationObserver& observer = nullptr);

struct AblationRow {
    std::string strategy;
    double ratio = 0.0;
    int k = 0;
    double psnr_db = 0.0;
    double ssim = 0.0;
};

// Cross product of {strategies} x {ratios} with shared seeds; each cell runs
// the pipeline once at max(Ks) and reads the per-iteration reports for the
// requested Ks (warm-started iterations make prefixes identical).
std::vector<AblationRow> ablation_matrix(const VolumeGrid& ground_truth,
                                         const ProjectionSet& initial_projs,
                                         const PipelineConfig& base,
                                         const std::vector<ReuseStrategy>& strategies,
                                         const std::vector<double>& ratios,
                                         const std::vector<int>& ks,
                                         const DenoiserParams* denoiser);

// ---------------------------------------------------------------------------
// Refiner training corpus
// ---------------------------------------------------------------------------

struct CorpusConfig {
    int n_clean_views = 120;       // dense angle grid for clean projections
    int undertrain_views = 10;     // sparse subset used to fit the weak field
    int undertrain_steps = 200;
    int n_samples = 256;           // projector samples for the clean images
    double blur_sigma_lo = 0.5;    // parametric augmentation, in pixels
    double blur_sigma_hi = 1.5;
    double noise_frac_lo = 0.005;  // additive noise as a fraction of range
    double noise_frac_hi = 0.02;
    int holdout_every = 6;         // every n-th view goes to the held-out set
    uint64_t seed = 4242;
};

struct RefinerCorpus {
    int rows = 0, cols = 0;
    std::vector<ProjectionPair> train_pairs;    // normalized to ~[0,1]
    std::vector<ProjectionPair> holdout_pairs;  // same normalization
};

// Clean projections come from the projector; degraded counterparts from a
// deliberately under-trained field plus blur/noise augmentations. Each pair
// is scaled by the degraded image's range, mirroring the DRAT deployment
// path.
RefinerCorpus build_refiner_corpus(const VolumeGrid& ground_truth,
                                   const ScanGeometry& geom,
                                   const FieldConfig& field_config,
                                   const TrainConfig& train_config,
                                   const CorpusConfig& corpus);

}  // namespace diffnaf
