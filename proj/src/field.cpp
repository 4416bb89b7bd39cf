#include "diffnaf/field.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

#include "diffnaf/errors.hpp"
#include "diffnaf/parallel.hpp"
#include "diffnaf/rng.hpp"

namespace diffnaf {

void HashEncodingConfig::validate() const {
    if (n_levels < 1)
        throw InvalidArgumentError("HashEncodingConfig: n_levels must be >= 1");
    if (features_per_level < 1)
        throw InvalidArgumentError("HashEncodingConfig: features_per_level must be >= 1");
    if (table_size == 0 || (table_size & (table_size - 1)) != 0)
        throw InvalidArgumentError("HashEncodingConfig: table_size must be a power of two");
    if (base_resolution < 1)
        throw InvalidArgumentError("HashEncodingConfig: base_resolution must be >= 1");
    if (!(per_level_scale > 1.0))
        throw InvalidArgumentError("HashEncodingConfig: per_level_scale must be > 1");
    for (uint32_t p : hash_primes)
        if (p % 2 == 0)
            throw InvalidArgumentError("HashEncodingConfig: hash primes must be odd");
}

int HashEncodingConfig::level_resolution(int level) const {
    return static_cast<int>(std::floor(base_resolution *
                                       std::pow(per_level_scale, level)));
}

void FieldConfig::validate() const {
    encoding.validate();
    if (hidden_widths.empty())
        throw InvalidArgumentError("FieldConfig: needs at least one hidden layer");
    for (int w : hidden_widths)
        if (w < 1)
            throw InvalidArgumentError("FieldConfig: hidden widths must be >= 1");
}

std::vector<int> FieldConfig::layer_dims() const {
    std::vector<int> dims;
    dims.push_back(encoding.feature_dim());
    for (int w : hidden_widths) dims.push_back(w);
    dims.push_back(1);
    return dims;
}

void TrainConfig::validate() const {
    if (steps_per_outer_iter < 1)
        throw InvalidArgumentError("TrainConfig: steps_per_outer_iter must be >= 1");
    if (rays_per_batch < 1)
        throw InvalidArgumentError("TrainConfig: rays_per_batch must be >= 1");
    if (samples_per_ray < 1)
        throw InvalidArgumentError("TrainConfig: samples_per_ray must be >= 1");
    if (!(w1 > 0.0 && w2 > 0.0))
        throw InvalidArgumentError("TrainConfig: w1 and w2 must be > 0");
    if (!(lr_hash > 0.0 && lr_mlp > 0.0))
        throw InvalidArgumentError("TrainConfig: learning rates must be > 0");
    if (!(lr_decay_floor > 0.0 && lr_decay_floor <= 1.0))
        throw InvalidArgumentError("TrainConfig: lr_decay_floor must be in (0, 1]");
}

template <typename S>
size_t FieldParamsT<S>::n_parameters() const {
    size_t n = 0;
    for (const auto& t : tables) n += t.size();
    for (const auto& w : weights) n += w.size();
    for (const auto& b : biases) n += b.size();
    return n;
}

template <typename S>
void FieldParamsT<S>::set_zero() {
    for (auto& t : tables) std::fill(t.begin(), t.end(), S(0));
    for (auto& w : weights) std::fill(w.begin(), w.end(), S(0));
    for (auto& b : biases) std::fill(b.begin(), b.end(), S(0));
}

template <typename S>
FieldParamsT<S> init_field_params(const FieldConfig& config, uint64_t seed) {
    config.validate();
    const auto& enc = config.encoding;
    FieldParamsT<S> p;
    Rng rng(hash_combine(seed, 0x66696c64));

    p.tables.resize(static_cast<size_t>(enc.n_levels));
    for (auto& t : p.tables) {
        t.resize(static_cast<size_t>(enc.table_size) * enc.features_per_level);
        for (auto& v : t) v = static_cast<S>(rng.next_uniform(-1e-4, 1e-4));
    }

    auto dims = config.layer_dims();
    size_t n_layers = dims.size() - 1;
    p.weights.resize(n_layers);
    p.biases.resize(n_layers);
    for (size_t l = 0; l < n_layers; ++l) {
        int in = dims[l], out = dims[l + 1];
        double limit = std::sqrt(6.0 / in);
        p.weights[l].resize(static_cast<size_t>(out) * in);
        for (auto& v : p.weights[l]) v = static_cast<S>(rng.next_uniform(-limit, limit));
        p.biases[l].assign(static_cast<size_t>(out), S(0));
    }
    // Start near-empty: softplus(-4) ~ 0.018/mm keeps initial integrals in a
    // sane range.
    p.biases.back()[0] = S(-4);
    return p;
}

template <typename S>
FieldParamsT<S> zero_like(const FieldParamsT<S>& p) {
    FieldParamsT<S> z;
    z.tables.resize(p.tables.size());
    for (size_t i = 0; i < p.tables.size(); ++i) z.tables[i].assign(p.tables[i].size(), S(0));
    z.weights.resize(p.weights.size());
    for (size_t i = 0; i < p.weights.size(); ++i)
        z.weights[i].assign(p.weights[i].size(), S(0));
    z.biases.resize(p.biases.size());
    for (size_t i = 0; i < p.biases.size(); ++i) z.biases[i].assign(p.biases[i].size(), S(0));
    return z;
}

namespace {

inline double softplus(double z) {
    if (z > 15.0) return z;
    return std::log1p(std::exp(z));
}

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
}

struct EncodeCtx {
    std::vector<int> resolutions;
    std::vector<int> act_offsets;  // per hidden layer, into the acts buffer
    int act_total = 0;
    std::vector<int> dims;

    void build(const FieldConfig& cfg) {
        resolutions.resize(static_cast<size_t>(cfg.encoding.n_levels));
        for (int l = 0; l < cfg.encoding.n_levels; ++l)
            resolutions[static_cast<size_t>(l)] = cfg.encoding.level_resolution(l);
        dims = cfg.layer_dims();
        act_offsets.clear();
        act_total = 0;
        for (size_t l = 1; l + 1 < dims.size(); ++l) {
            act_offsets.push_back(act_total);
            act_total += dims[l];
        }
    }
};

// Per-thread scratch for forward/backward passes over one ray.
template <typename S>
struct Workspace {
    std::vector<double> offsets;
    std::vector<Vec3> pos;        // normalized sample positions
    std::vector<S> feats;         // n_samples x feat_dim
    std::vector<S> acts;          // n_samples x act_total
    std::vector<double> zs, mus;  // pre-softplus output and attenuation
    std::vector<uint32_t> cidx;   // n_samples x L x 8
    std::vector<S> cw;            // n_samples x L x 8
    std::vector<S> delta_a, delta_b;

    void resize(const EncodeCtx& ctx, const FieldConfig& cfg, int n_samples) {
        size_t n = static_cast<size_t>(n_samples);
        int feat_dim = cfg.encoding.feature_dim();
        int corners = cfg.encoding.n_levels * 8;
        offsets.resize(n);
        pos.resize(n);
        feats.resize(n * feat_dim);
        acts.resize(n * std::max(ctx.act_total, 1));
        zs.resize(n);
        mus.resize(n);
        cidx.resize(n * corners);
        cw.resize(n * corners);
        int maxw = 0;
        for (int d : ctx.dims) maxw = std::max(maxw, d);
        delta_a.resize(static_cast<size_t>(maxw));
        delta_b.resize(static_cast<size_t>(maxw));
    }
};

template <typename S>
inline void encode_point(const HashEncodingConfig& enc, const EncodeCtx& ctx,
                         const std::vector<std::vector<S>>& tables, const Vec3& p,
                         S* feat, uint32_t* cidx, S* cw) {
    if (!(p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0 && p.z >= 0.0 &&
          p.z <= 1.0))
        throw InvalidArgumentError("encode: point outside the normalized [0,1]^3 domain");
    const int F = enc.features_per_level;
    const uint32_t mask = enc.table_size - 1;
    for (int l = 0; l < enc.n_levels; ++l) {
        int N = ctx.resolutions[static_cast<size_t>(l)];
        double px = p.x * N, py = p.y * N, pz = p.z * N;
        int ix = static_cast<int>(std::floor(px));
        int iy = static_cast<int>(std::floor(py));
        int iz = static_cast<int>(std::floor(pz));
        double fx = px - ix, fy = py - iy, fz = pz - iz;
        const std::vector<S>& table = tables[static_cast<size_t>(l)];
        S* f = feat + static_cast<size_t>(l) * F;
        for (int c = 0; c < F; ++c) f[c] = S(0);
        for (int corner = 0; corner < 8; ++corner) {
            int dx = corner & 1, dy = (corner >> 1) & 1, dz = (corner >> 2) & 1;
            double w = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) *
                       (dz ? fz : 1.0 - fz);
            uint32_t h = (static_cast<uint32_t>(ix + dx) * enc.hash_primes[0]) ^
                         (static_cast<uint32_t>(iy + dy) * enc.hash_primes[1]) ^
                         (static_cast<uint32_t>(iz + dz) * enc.hash_primes[2]);
            h &= mask;
            int slot = l * 8 + corner;
            cidx[slot] = h;
            S ws = static_cast<S>(w);
            cw[slot] = ws;
            const S* row = table.data() + static_cast<size_t>(h) * F;
            for (int c = 0; c < F; ++c) f[c] += ws * row[c];
        }
    }
}

// MLP forward from features; fills acts and returns pre-softplus output.
template <typename S>
inline double mlp_forward(const FieldParamsT<S>& params, const EncodeCtx& ctx,
                          const S* feat, S* acts) {
    const S* x = feat;
    size_t n_layers = params.weights.size();
    for (size_t l = 0; l < n_layers; ++l) {
        int in = ctx.dims[l], out = ctx.dims[l + 1];
        const S* W = params.weights[l].data();
        const S* b = params.biases[l].data();
        if (l + 1 == n_layers) {
            S acc = b[0];
            #pragma omp simd reduction(+ : acc)
            for (int i = 0; i < in; ++i) acc += W[i] * x[i];
            return static_cast<double>(acc);
        }
        S* a = acts + ctx.act_offsets[l];
        for (int o = 0; o < out; ++o) {
            S acc = b[o];
            const S* row = W + static_cast<size_t>(o) * in;
            #pragma omp simd reduction(+ : acc)
            for (int i = 0; i < in; ++i) acc += row[i] * x[i];
            a[o] = acc > S(0) ? acc : S(0);
        }
        x = a;
    }
    return 0.0;  // unreachable
}

// Reverse pass for one sample; accumulates into grads and uses ws delta
// buffers. dmu is dLoss/dmu at this sample.
template <typename S>
inline void mlp_backward(const FieldParamsT<S>& params, const EncodeCtx& ctx,
                         const S* feat, const S* acts, double z, double dmu,
                         const uint32_t* cidx, const S* cw,
                         const HashEncodingConfig& enc, FieldParamsT<S>& grads,
                         S* delta, S* delta_prev) {
    size_t n_layers = params.weights.size();
    delta[0] = static_cast<S>(dmu * sigmoid(z));
    for (size_t li = n_layers; li-- > 0;) {
        int in = ctx.dims[li], out = ctx.dims[li + 1];
        const S* x = (li == 0) ? feat : acts + ctx.act_offsets[li - 1];
        const S* W = params.weights[li].data();
        S* dW = grads.weights[li].data();
        S* db = grads.biases[li].data();
        for (int o = 0; o < out; ++o) {
            S d = delta[o];
            if (d == S(0)) continue;
            db[o] += d;
            S* dwrow = dW + static_cast<size_t>(o) * in;
            #pragma omp simd
            for (int i = 0; i < in; ++i) dwrow[i] += d * x[i];
        }
        for (int i = 0; i < in; ++i) delta_prev[i] = S(0);
        for (int o = 0; o < out; ++o) {
            S d = delta[o];
            if (d == S(0)) continue;
            const S* row = W + static_cast<size_t>(o) * in;
            #pragma omp simd
            for (int i = 0; i < in; ++i) delta_prev[i] += d * row[i];
        }
        if (li > 0) {
            // ReLU mask of the layer below; the feature input has none
            const S* below = acts + ctx.act_offsets[li - 1];
            for (int i = 0; i < in; ++i)
                if (!(below[i] > S(0))) delta_prev[i] = S(0);
        }
        std::swap(delta, delta_prev);
    }
    // delta now holds dLoss/dfeat; scatter into the hash tables.
    const int F = enc.features_per_level;
    for (int l = 0; l < enc.n_levels; ++l) {
        S* gt = grads.tables[static_cast<size_t>(l)].data();
        const S* df = delta + static_cast<size_t>(l) * F;
        for (int corner = 0; corner < 8; ++corner) {
            int slot = l * 8 + corner;
            S w = cw[slot];
            if (w == S(0)) continue;
            S* row = gt + static_cast<size_t>(cidx[slot]) * F;
            for (int c = 0; c < F; ++c) row[c] += w * df[c];
        }
    }
}

// Forward pass over a ray; returns the predicted integral. Caches everything
// needed for the reverse pass in ws when cache == true.
template <typename S>
double ray_forward(const FieldParamsT<S>& params, const FieldConfig& cfg,
                   const EncodeCtx& ctx, double extent_mm, const Ray& ray,
                   int n_samples, uint64_t jitter_key, Workspace<S>& ws,
                   int* n_hit) {
    *n_hit = 0;
    auto hit = ray_entry_exit(ray, extent_mm);
    if (!hit) return 0.0;
    auto [t0, t1] = *hit;
    double dt = (t1 - t0) / n_samples;
    double inv_span = 1.0 / (2.0 * extent_mm);

    if (jitter_key != 0) {
        Rng r(jitter_key);
        for (int i = 0; i < n_samples; ++i) ws.offsets[static_cast<size_t>(i)] = r.next_double();
    } else {
        std::fill(ws.offsets.begin(), ws.offsets.begin() + n_samples, 0.5);
    }

    int feat_dim = cfg.encoding.feature_dim();
    int corners = cfg.encoding.n_levels * 8;
    double integral = 0.0;
    for (int i = 0; i < n_samples; ++i) {
        double t = t0 + (i + ws.offsets[static_cast<size_t>(i)]) * dt;
        Vec3 p = ray.origin_mm + t * ray.direction;
        Vec3 q{(p.x + extent_mm) * inv_span, (p.y + extent_mm) * inv_span,
               (p.z + extent_mm) * inv_span};
        // fp guard: clamp roundoff just past the faces
        q.x = std::min(std::max(q.x, 0.0), 1.0);
        q.y = std::min(std::max(q.y, 0.0), 1.0);
        q.z = std::min(std::max(q.z, 0.0), 1.0);
        ws.pos[static_cast<size_t>(i)] = q;
        S* feat = ws.feats.data() + static_cast<size_t>(i) * feat_dim;
        encode_point(cfg.encoding, ctx, params.tables, q, feat,
                     ws.cidx.data() + static_cast<size_t>(i) * corners,
                     ws.cw.data() + static_cast<size_t>(i) * corners);
        double z = mlp_forward(params, ctx, feat,
                               ws.acts.data() + static_cast<size_t>(i) * ctx.act_total);
        ws.zs[static_cast<size_t>(i)] = z;
        double mu = softplus(z);
        ws.mus[static_cast<size_t>(i)] = mu;
        integral += mu * dt;
    }
    *n_hit = n_samples;
    return integral;
}

template <typename S>
struct TrainContext {
    EncodeCtx enc;
    std::vector<FieldParamsT<S>> slot_grads;
    std::vector<Workspace<S>> slot_ws;

    void build(const FieldConfig& cfg, const FieldParamsT<S>& params, int n_samples) {
        enc.build(cfg);
        slot_grads.assign(static_cast<size_t>(kNumSlots), zero_like(params));
        slot_ws.resize(static_cast<size_t>(kNumSlots));
        for (auto& w : slot_ws) w.resize(enc, cfg, n_samples);
    }
};

template <typename S>
double loss_and_gradients_impl(const FieldParamsT<S>& params, const FieldConfig& cfg,
                               double extent_mm, int samples_per_ray,
                               const std::vector<RayTarget>& batch,
                               TrainContext<S>& ctx, FieldParamsT<S>& grads) {
    if (batch.empty())
        throw InvalidArgumentError("loss_and_gradients: empty batch");
    const size_t B = batch.size();
    const double inv_b = 1.0 / static_cast<double>(B);
    std::array<double, kNumSlots> slot_loss{};

    #pragma omp parallel for schedule(dynamic, 1)
    for (int slot = 0; slot < kNumSlots; ++slot) {
        FieldParamsT<S>& g = ctx.slot_grads[static_cast<size_t>(slot)];
        Workspace<S>& ws = ctx.slot_ws[static_cast<size_t>(slot)];
        g.set_zero();
        double local_loss = 0.0;
        auto [lo, hi] = slot_range(B, slot);
        for (size_t r = lo; r < hi; ++r) {
            const RayTarget& rt = batch[r];
            int n_hit = 0;
            double integral = ray_forward(params, cfg, ctx.enc, extent_mm, rt.ray,
                                          samples_per_ray, rt.jitter_key, ws, &n_hit);
            double resid = rt.target - integral;
            local_loss += rt.weight * resid * resid;
            if (n_hit == 0) continue;
            auto span = ray_entry_exit(rt.ray, extent_mm);
            double dt = (span->second - span->first) / samples_per_ray;
            double d_integral = -2.0 * rt.weight * resid * inv_b;
            double dmu = d_integral * dt;
            int feat_dim = cfg.encoding.feature_dim();
            int corners = cfg.encoding.n_levels * 8;
            for (int i = 0; i < n_hit; ++i) {
                mlp_backward(params, ctx.enc,
                             ws.feats.data() + static_cast<size_t>(i) * feat_dim,
                             ws.acts.data() + static_cast<size_t>(i) * ctx.enc.act_total,
                             ws.zs[static_cast<size_t>(i)], dmu,
                             ws.cidx.data() + static_cast<size_t>(i) * corners,
                             ws.cw.data() + static_cast<size_t>(i) * corners,
                             cfg.encoding, g, ws.delta_a.data(), ws.delta_b.data());
            }
        }
        slot_loss[static_cast<size_t>(slot)] = local_loss;
    }

    double loss = 0.0;
    for (int s = 0; s < kNumSlots; ++s) loss += slot_loss[static_cast<size_t>(s)];
    loss *= inv_b;
    if (!std::isfinite(loss))
        throw DivergenceError("loss_and_gradients: non-finite loss");

    // Ordered reduction of the slot accumulators.
    auto reduce = [&](auto member) {
        auto& dst = grads.*member;
        for (size_t a = 0; a < dst.size(); ++a) {
            S* out = dst[a].data();
            size_t n = dst[a].size();
            #pragma omp parallel for schedule(static)
            for (long long j = 0; j < static_cast<long long>(n); ++j) {
                S acc = S(0);
                for (int s = 0; s < kNumSlots; ++s)
                    acc += (ctx.slot_grads[static_cast<size_t>(s)].*member)[a][static_cast<size_t>(j)];
                out[j] = acc;
            }
        }
    };
    reduce(&FieldParamsT<S>::tables);
    reduce(&FieldParamsT<S>::weights);
    reduce(&FieldParamsT<S>::biases);
    return loss;
}

template <typename S>
struct AdamState {
    FieldParamsT<S> m, v;
    int64_t t = 0;
};

template <typename S>
void adam_step(FieldParamsT<S>& params, const FieldParamsT<S>& grads,
               AdamState<S>& state, double lr_hash, double lr_mlp) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    state.t += 1;
    double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    auto update = [&](std::vector<S>& p, const std::vector<S>& g, std::vector<S>& m,
                      std::vector<S>& v, double lr) {
        size_t n = p.size();
        S* pp = p.data();
        const S* gp = g.data();
        S* mp = m.data();
        S* vp = v.data();
        #pragma omp parallel for schedule(static)
        for (long long j = 0; j < static_cast<long long>(n); ++j) {
            double gj = static_cast<double>(gp[j]);
            double mj = b1 * static_cast<double>(mp[j]) + (1.0 - b1) * gj;
            double vj = b2 * static_cast<double>(vp[j]) + (1.0 - b2) * gj * gj;
            mp[j] = static_cast<S>(mj);
            vp[j] = static_cast<S>(vj);
            double step = lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps);
            pp[j] = static_cast<S>(static_cast<double>(pp[j]) - step);
        }
    };
    for (size_t i = 0; i < params.tables.size(); ++i)
        update(params.tables[i], grads.tables[i], state.m.tables[i], state.v.tables[i],
               lr_hash);
    for (size_t i = 0; i < params.weights.size(); ++i)
        update(params.weights[i], grads.weights[i], state.m.weights[i],
               state.v.weights[i], lr_mlp);
    for (size_t i = 0; i < params.biases.size(); ++i)
        update(params.biases[i], grads.biases[i], state.m.biases[i], state.v.biases[i],
               lr_mlp);
}

}  // namespace

template <typename S>
void encode(const HashEncodingConfig& config,
            const std::vector<std::vector<S>>& tables, const Vec3& point, S* out) {
    config.validate();
    FieldConfig tmp;
    tmp.encoding = config;
    EncodeCtx ctx;
    ctx.build(tmp);
    std::vector<uint32_t> cidx(static_cast<size_t>(config.n_levels) * 8);
    std::vector<S> cw(static_cast<size_t>(config.n_levels) * 8);
    encode_point(config, ctx, tables, point, out, cidx.data(), cw.data());
}

template <typename S>
S predict_mu(const FieldParamsT<S>& params, const FieldConfig& config,
             const Vec3& point) {
    EncodeCtx ctx;
    ctx.build(config);
    std::vector<S> feat(static_cast<size_t>(config.encoding.feature_dim()));
    std::vector<uint32_t> cidx(static_cast<size_t>(config.encoding.n_levels) * 8);
    std::vector<S> cw(static_cast<size_t>(config.encoding.n_levels) * 8);
    encode_point(config.encoding, ctx, params.tables, point, feat.data(), cidx.data(),
                 cw.data());
    std::vector<S> acts(static_cast<size_t>(std::max(ctx.act_total, 1)));
    double z = mlp_forward(params, ctx, feat.data(), acts.data());
    return static_cast<S>(softplus(z));
}

template <typename S>
double predict_ray_integral(const FieldParamsT<S>& params, const FieldConfig& config,
                            double extent_mm, const Ray& ray, int n_samples,
                            const double* offsets) {
    if (n_samples < 1)
        throw InvalidArgumentError("predict_ray_integral: n_samples must be >= 1");
    EncodeCtx ctx;
    ctx.build(config);
    auto hit = ray_entry_exit(ray, extent_mm);
    if (!hit) return 0.0;
    auto [t0, t1] = *hit;
    double dt = (t1 - t0) / n_samples;
    double inv_span = 1.0 / (2.0 * extent_mm);
    std::vector<S> feat(static_cast<size_t>(config.encoding.feature_dim()));
    std::vector<S> acts(static_cast<size_t>(std::max(ctx.act_total, 1)));
    std::vector<uint32_t> cidx(static_cast<size_t>(config.encoding.n_levels) * 8);
    std::vector<S> cw(static_cast<size_t>(config.encoding.n_levels) * 8);
    double acc = 0.0;
    for (int i = 0; i < n_samples; ++i) {
        double off = offsets ? offsets[i] : 0.5;
        double t = t0 + (i + off) * dt;
        Vec3 p = ray.origin_mm + t * ray.direction;
        Vec3 q{(p.x + extent_mm) * inv_span, (p.y + extent_mm) * inv_span,
               (p.z + extent_mm) * inv_span};
        q.x = std::min(std::max(q.x, 0.0), 1.0);
        q.y = std::min(std::max(q.y, 0.0), 1.0);
        q.z = std::min(std::max(q.z, 0.0), 1.0);
        encode_point(config.encoding, ctx, params.tables, q, feat.data(), cidx.data(),
                     cw.data());
        double z = mlp_forward(params, ctx, feat.data(), acts.data());
        acc += softplus(z) * dt;
    }
    return acc;
}

template <typename S>
double loss_and_gradients(const FieldParamsT<S>& params, const FieldConfig& config,
                          double extent_mm, int samples_per_ray,
                          const std::vector<RayTarget>& batch,
                          FieldParamsT<S>& grads) {
    TrainContext<S> ctx;
    ctx.build(config, params, samples_per_ray);
    grads = zero_like(params);
    return loss_and_gradients_impl(params, config, extent_mm, samples_per_ray, batch,
                                   ctx, grads);
}

template <typename S>
TrainResultT<S> train_field(const ProjectionSet& projs, const FieldConfig& config,
                            const TrainConfig& train, const FieldParamsT<S>* init) {
    config.validate();
    train.validate();
    projs.validate();
    if (projs.images.empty())
        throw InvalidArgumentError("train_field: needs at least one projection");

    const double extent = projs.geometry.volume_extent_mm;
    TrainResultT<S> result;
    result.params = init ? *init : init_field_params<S>(config, train.rng_seed);
    FieldParamsT<S> grads = zero_like(result.params);
    AdamState<S> adam{zero_like(result.params), zero_like(result.params), 0};
    TrainContext<S> ctx;
    ctx.build(config, result.params, train.samples_per_ray);

    // Pooled pixel index across all projections.
    std::vector<size_t> prefix(projs.images.size() + 1, 0);
    for (size_t k = 0; k < projs.images.size(); ++k)
        prefix[k + 1] = prefix[k] + projs.images[k].n_pixels();
    const size_t total = prefix.back();

    Rng master(hash_combine(train.rng_seed, 0x747261696e));
    std::vector<RayTarget> batch(static_cast<size_t>(train.rays_per_batch));
    result.losses.reserve(static_cast<size_t>(train.steps_per_outer_iter));

    for (int step = 0; step < train.steps_per_outer_iter; ++step) {
        for (int i = 0; i < train.rays_per_batch; ++i) {
            size_t pick = master.next_below(total);
            size_t k = static_cast<size_t>(
                std::upper_bound(prefix.begin(), prefix.end(), pick) -
                prefix.begin() - 1);
            const ProjectionImage& im = projs.images[k];
            size_t p = pick - prefix[k];
            int u = static_cast<int>(p % static_cast<size_t>(im.cols));
            int v = static_cast<int>(p / static_cast<size_t>(im.cols));
            RayTarget& rt = batch[static_cast<size_t>(i)];
            rt.ray = ray_at_angle(projs.geometry, im.angle_deg, u, v);
            rt.target = im.pixels[p];
            rt.weight = im.weight;
            rt.jitter_key =
                train.jitter
                    ? hash_combine(train.rng_seed,
                                   static_cast<uint64_t>(step) *
                                           static_cast<uint64_t>(train.rays_per_batch) +
                                       static_cast<uint64_t>(i) + 1)
                    : 0;
        }
        double loss = loss_and_gradients_impl(result.params, config, extent,
                                              train.samples_per_ray, batch, ctx, grads);
        double decay =
            1.0 - (1.0 - train.lr_decay_floor) *
                      (train.steps_per_outer_iter > 1
                           ? static_cast<double>(step) / (train.steps_per_outer_iter - 1)
                           : 0.0);
        adam_step(result.params, grads, adam, train.lr_hash * decay,
                  train.lr_mlp * decay);
        result.losses.push_back(loss);
    }
    return result;
}

namespace {

template <typename S>
VolumeGrid render_volume_impl(const FieldParamsT<S>& params, const FieldConfig& config,
                              double extent_mm, std::array<int, 3> dims,
                              double voxel_mm, bool parallel) {
    EncodeCtx ctx;
    ctx.build(config);
    VolumeGrid vol = VolumeGrid::centered(dims, voxel_mm);
    double inv_span = 1.0 / (2.0 * extent_mm);
    const int feat_dim = config.encoding.feature_dim();
    const int corners = config.encoding.n_levels * 8;

    #pragma omp parallel if (parallel)
    {
        std::vector<S> feat(static_cast<size_t>(feat_dim));
        std::vector<S> acts(static_cast<size_t>(std::max(ctx.act_total, 1)));
        std::vector<uint32_t> cidx(static_cast<size_t>(corners));
        std::vector<S> cw(static_cast<size_t>(corners));
        #pragma omp for schedule(static)
        for (int z = 0; z < dims[2]; ++z) {
            for (int y = 0; y < dims[1]; ++y) {
                for (int x = 0; x < dims[0]; ++x) {
                    Vec3 p = vol.voxel_center(x, y, z);
                    Vec3 q{(p.x + extent_mm) * inv_span, (p.y + extent_mm) * inv_span,
                           (p.z + extent_mm) * inv_span};
                    q.x = std::min(std::max(q.x, 0.0), 1.0);
                    q.y = std::min(std::max(q.y, 0.0), 1.0);
                    q.z = std::min(std::max(q.z, 0.0), 1.0);
                    encode_point(config.encoding, ctx, params.tables, q, feat.data(),
                                 cidx.data(), cw.data());
                    double zz = mlp_forward(params, ctx, feat.data(), acts.data());
                    vol.at(x, y, z) = softplus(zz);
                }
            }
        }
    }
    return vol;
}

}  // namespace

template <typename S>
VolumeGrid render_volume(const FieldParamsT<S>& params, const FieldConfig& config,
                         double extent_mm, std::array<int, 3> dims, double voxel_mm) {
    return render_volume_impl(params, config, extent_mm, dims, voxel_mm, true);
}

template <typename S>
VolumeGrid render_volume_serial(const FieldParamsT<S>& params,
                                const FieldConfig& config, double extent_mm,
                                std::array<int, 3> dims, double voxel_mm) {
    return render_volume_impl(params, config, extent_mm, dims, voxel_mm, false);
}

// Explicit instantiations: float is the runtime scalar, double the
// finite-difference check mode.
template struct FieldParamsT<float>;
template struct FieldParamsT<double>;

#define DIFFNAF_INSTANTIATE(S)                                                      \
    template FieldParamsT<S> init_field_params<S>(const FieldConfig&, uint64_t);    \
    template FieldParamsT<S> zero_like<S>(const FieldParamsT<S>&);                  \
    template void encode<S>(const HashEncodingConfig&,                               \
                            const std::vector<std::vector<S>>&, const Vec3&, S*);   \
    template S predict_mu<S>(const FieldParamsT<S>&, const FieldConfig&,            \
                             const Vec3&);                                           \
    template double predict_ray_integral<S>(const FieldParamsT<S>&,                 \
                                            const FieldConfig&, double, const Ray&, \
                                            int, const double*);                     \
    template double loss_and_gradients<S>(const FieldParamsT<S>&, const FieldConfig&, \
                                          double, int, const std::vector<RayTarget>&, \
                                          FieldParamsT<S>&);                          \
    template TrainResultT<S> train_field<S>(const ProjectionSet&, const FieldConfig&, \
                                            const TrainConfig&, const FieldParamsT<S>*); \
    template VolumeGrid render_volume<S>(const FieldParamsT<S>&, const FieldConfig&, \
                                         double, std::array<int, 3>, double);        \
    template VolumeGrid render_volume_serial<S>(const FieldParamsT<S>&,              \
                                                const FieldConfig&, double,          \
                                                std::array<int, 3>, double);

DIFFNAF_INSTANTIATE(float)
DIFFNAF_INSTANTIATE(double)
#undef DIFFNAF_INSTANTIATE

}  // namespace diffnaf
