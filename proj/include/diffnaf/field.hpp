#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "diffnaf/geometry.hpp"
#include "diffnaf/projection.hpp"
#include "diffnaf/volume.hpp"

namespace diffnaf {

// Multi-resolution hash grid: L levels of T-entry tables with F features
// each, trilinearly interpolated at geometrically growing resolutions and
// concatenated.
struct HashEncodingConfig {
    int n_levels = 8;
    int features_per_level = 2;
    uint32_t table_size = 1u << 16;  // power of two
    int base_resolution = 16;
    double per_level_scale = 1.5;
    std::array<uint32_t, 3> hash_primes{1u, 2654435761u, 805459861u};

    void validate() const;
    int level_resolution(int level) const;
    int feature_dim() const { return n_levels * features_per_level; }
};

struct FieldConfig {
    HashEncodingConfig encoding;
    std::vector<int> hidden_widths{64, 64};  // ReLU layers; softplus output

    void validate() const;
    // feat_dim, hidden..., 1
    std::vector<int> layer_dims() const;
};

template <typename S>
struct FieldParamsT {
    std::vector<std::vector<S>> tables;   // n_levels x (table_size * F)
    std::vector<std::vector<S>> weights;  // per layer, row-major out x in
    std::vector<std::vector<S>> biases;   // per layer

    size_t n_parameters() const;
    void set_zero();

    template <typename T>
    FieldParamsT<T> cast() const {
        FieldParamsT<T> out;
        out.tables.resize(tables.size());
        for (size_t i = 0; i < tables.size(); ++i)
            out.tables[i].assign(tables[i].begin(), tables[i].end());
        out.weights.resize(weights.size());
        for (size_t i = 0; i < weights.size(); ++i)
            out.weights[i].assign(weights[i].begin(), weights[i].end());
        out.biases.resize(biases.size());
        for (size_t i = 0; i < biases.size(); ++i)
            out.biases[i].assign(biases[i].begin(), biases[i].end());
        return out;
    }
};

using FieldParams = FieldParamsT<float>;
using FieldParams64 = FieldParamsT<double>;

template <typename S>
FieldParamsT<S> init_field_params(const FieldConfig& config, uint64_t seed);

template <typename S>
FieldParamsT<S> zero_like(const FieldParamsT<S>& p);

// Hash-encode a point in [0,1]^3 into out[feat_dim]. Throws on points
// outside the domain.
template <typename S>
void encode(const HashEncodingConfig& config,
            const std::vector<std::vector<S>>& tables, const Vec3& point,
            S* out);

// Attenuation at a normalized point; softplus keeps the value >= 0.
template <typename S>
S predict_mu(const FieldParamsT<S>& params, const FieldConfig& config,
             const Vec3& point);

// Line integral of the field along a ray through the cube
// [-extent, extent]^3 (midpoint rule, optional per-sample offsets in [0,1)).
template <typename S>
double predict_ray_integral(const FieldParamsT<S>& params,
                            const FieldConfig& config, double extent_mm,
                            const Ray& ray, int n_samples,
                            const double* offsets = nullptr);

// One supervised ray. jitter_key != 0 selects deterministic stratified
// sample offsets derived from the key; 0 uses midpoints.
struct RayTarget {
    Ray ray;
    double target = 0.0;
    double weight = 1.0;
    uint64_t jitter_key = 0;
};

// Weighted squared-residual loss over the batch and its reverse-mode
// gradients (written into `grads`, which must be zero_like(params)).
// loss = (1/B) sum_r w_r (target_r - I_r)^2. Sample positions are treated
// as constants. Throws DivergenceError if the loss is non-finite.
template <typename S>
double loss_and_gradients(const FieldParamsT<S>& params, const FieldConfig& config,
                          double extent_mm, int samples_per_ray,
                          const std::vector<RayTarget>& batch,
                          FieldParamsT<S>& grads);

struct TrainConfig {
    int steps_per_outer_iter = 1500;
    int rays_per_batch = 256;
    int samples_per_ray = 64;
    double lr_hash = 1e-2;
    double lr_mlp = 1e-3;
    double lr_decay_floor = 0.1;  // linear decay from lr to floor*lr
    double w1 = 1.0;              // weight stamped on real projections
    double w2 = 0.5;              // weight stamped on pseudo projections
    uint64_t rng_seed = 1234;
    bool jitter = true;

    void validate() const;
};

template <typename S>
struct TrainResultT {
    FieldParamsT<S> params;
    std::vector<double> losses;  // one entry per step
};

// Adam over random ray batches drawn uniformly from the pooled pixels of all
// projections; each ray carries its image's weight. Deterministic for a
// fixed seed and any thread count.
template <typename S>
TrainResultT<S> train_field(const ProjectionSet& projs, const FieldConfig& config,
                            const TrainConfig& train,
                            const FieldParamsT<S>* init = nullptr);

// Evaluate the field at every voxel center of a grid centered on the
// isocenter.
template <typename S>
VolumeGrid render_volume(const FieldParamsT<S>& params, const FieldConfig& config,
                         double extent_mm, std::array<int, 3> dims,
                         double voxel_mm);

template <typename S>
VolumeGrid render_volume_serial(const FieldParamsT<S>& params,
                                const FieldConfig& config, double extent_mm,
                                std::array<int, 3> dims, double voxel_mm);

extern template struct FieldParamsT<float>;
extern template struct FieldParamsT<double>;

}  // namespace diffnaf
