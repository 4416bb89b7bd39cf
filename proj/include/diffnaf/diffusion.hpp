#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "diffnaf/projection.hpp"

namespace diffnaf {

// Residual/noise cumulant schedules. alpha_bar[t] scales the deterministic
// residual, beta_bar[t] the accumulated noise std; both run 0 -> 1 exactly
// over t = 0..T.
struct DiffusionSchedule {
    int T = 0;
    std::vector<double> alpha;      // per-step residual coefficients, index 1..T
    std::vector<double> beta;       // per-step noise scales, index 1..T
    std::vector<double> alpha_bar;  // index 0..T
    std::vector<double> beta_bar;   // index 0..T
};

// alpha_bar[t] = beta_bar[t] = t/T; the endpoints and telescoping sums hold
// exactly in floating point.
DiffusionSchedule make_schedule(int T);

// P_t = P_0 + alpha_bar[t] * (P_in - P_0) + beta_bar[t] * eps. The t = 0 and
// t = T endpoints are returned exactly.
std::vector<double> diffuse_forward(const std::vector<double>& p0,
                                    const std::vector<double>& p_in, int t,
                                    const DiffusionSchedule& schedule,
                                    const std::vector<double>& eps);

// Dual-branch predictor: fills res_out and eps_out from (P_t, t, P_in).
using DenoiserFn = std::function<void(const std::vector<double>& p_t, int t,
                                      const std::vector<double>& p_in,
                                      std::vector<double>& res_out,
                                      std::vector<double>& eps_out)>;

// P_{t-1} = P_t - (abar_t - abar_{t-1}) res_pred - (bbar_t - bbar_{t-1}) eps_pred
std::vector<double> reverse_step(const std::vector<double>& p_t, int t,
                                 const std::vector<double>& p_in,
                                 const DenoiserFn& denoiser,
                                 const DiffusionSchedule& schedule);

// ---------------------------------------------------------------------------
// DRAT: invertible per-projection affine range transform
// ---------------------------------------------------------------------------

struct DratParams {
    double gamma = 1.0;
    double b = 0.0;
    double epsilon_floor = 1e-6;  // |gamma| >= epsilon_floor keeps it invertible
};

// Affine map sending [min(P), max(P)] onto the target range. Constant images
// get gamma = epsilon_floor and land on the midpoint of the target.
DratParams estimate_drat(const std::vector<double>& p, double target_lo = 0.0,
                         double target_hi = 1.0);

std::vector<double> drat_apply(const std::vector<double>& p, const DratParams& drat);
std::vector<double> drat_invert(const std::vector<double>& p_scaled,
                                const DratParams& drat);

// ---------------------------------------------------------------------------
// Dual-branch conditional denoiser (shared encoder-decoder, two 1x1 heads,
// sinusoidal time embedding, conditioned on P_in through a second channel)
// ---------------------------------------------------------------------------

struct DenoiserConfig {
    int base_channels = 16;
    int time_embed_dim = 16;

    void validate() const;
};

template <typename S>
struct DenoiserParamsT {
    DenoiserConfig config;
    std::vector<S> data;  // all tensors, flat; layout fixed by config

    size_t n_parameters() const { return data.size(); }
};

using DenoiserParams = DenoiserParamsT<float>;
using DenoiserParams64 = DenoiserParamsT<double>;

template <typename S>
DenoiserParamsT<S> init_denoiser(const DenoiserConfig& config, uint64_t seed);

// Run the network on one image pair; rows and cols must be even.
template <typename S>
void denoiser_apply(const DenoiserParamsT<S>& params, const std::vector<double>& p_t,
                    int t, const std::vector<double>& p_in, int rows, int cols,
                    std::vector<double>& res_out, std::vector<double>& eps_out);

// Binds params into the std::function interface used by reverse_step.
template <typename S>
DenoiserFn make_denoiser_fn(const DenoiserParamsT<S>& params, int rows, int cols);

struct ProjectionPair {
    std::vector<double> clean;     // P_0
    std::vector<double> degraded;  // P_in
};

struct DenoiserTrainConfig {
    int steps = 2000;
    int batch = 4;
    double lr = 1e-3;
    double lambda_res = 1.0;
    double lambda_eps = 1.0;
    uint64_t seed = 99;

    void validate() const;
};

template <typename S>
struct DenoiserTrainResultT {
    DenoiserParamsT<S> params;
    std::vector<double> losses;
};

// Per step: sample a pair, t ~ U{1..T}, eps ~ N(0,1); form P_t by the
// forward process with P_in = degraded and minimize
// lambda_res * mean (P_res - res_pred)^2 + lambda_eps * mean (eps - eps_pred)^2.
// Deterministic for a fixed seed and any thread count.
template <typename S>
DenoiserTrainResultT<S> train_denoiser(const std::vector<ProjectionPair>& pairs,
                                       int rows, int cols,
                                       const DiffusionSchedule& schedule,
                                       const DenoiserTrainConfig& config,
                                       const DenoiserParamsT<S>* init = nullptr);

// Training objective evaluated without updates (validation).
template <typename S>
double denoiser_objective(const DenoiserParamsT<S>& params,
                          const std::vector<ProjectionPair>& pairs, int rows,
                          int cols, const DiffusionSchedule& schedule,
                          double lambda_res, double lambda_eps, uint64_t seed,
                          int n_draws);

// Loss and reverse-mode gradients for one fixed (pair, t, eps) draw; grads is
// resized to the flat parameter layout. Test hook mirroring the training
// objective.
template <typename S>
double denoiser_loss_and_gradients(const DenoiserParamsT<S>& params,
                                   const ProjectionPair& pair, int t,
                                   const std::vector<double>& eps, int rows,
                                   int cols, const DiffusionSchedule& schedule,
                                   double lambda_res, double lambda_eps,
                                   std::vector<S>& grads);

// ---------------------------------------------------------------------------
// Refinement
// ---------------------------------------------------------------------------

// DRAT -> P_T = P_in + eps -> T reverse steps -> inverse DRAT. Deterministic
// for a fixed seed; add_noise = false injects eps = 0 (identity path for a
// zero-output denoiser).
ProjectionImage refine_projection(const ProjectionImage& synthetic,
                                  const DenoiserFn& denoiser,
                                  const DiffusionSchedule& schedule, uint64_t seed,
                                  bool add_noise = true);

// Same reverse process under a caller-supplied fixed affine transform
// (shared-range normalization round trip).
ProjectionImage refine_projection_fixed_scale(const ProjectionImage& synthetic,
                                              double gamma, double b,
                                              const DenoiserFn& denoiser,
                                              const DiffusionSchedule& schedule,
                                              uint64_t seed, bool add_noise = true);

extern template struct DenoiserParamsT<float>;
extern template struct DenoiserParamsT<double>;

}  // namespace diffnaf
