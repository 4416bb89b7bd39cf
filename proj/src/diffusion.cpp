#include "diffnaf/diffusion.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <string>

#include "diffnaf/errors.hpp"
#include "diffnaf/parallel.hpp"
#include "diffnaf/rng.hpp"

namespace diffnaf {

DiffusionSchedule make_schedule(int T) {
    if (T < 1) throw InvalidArgumentError("make_schedule: T must be >= 1");
    DiffusionSchedule s;
    s.T = T;
    s.alpha_bar.resize(static_cast<size_t>(T) + 1);
    s.beta_bar.resize(static_cast<size_t>(T) + 1);
    for (int t = 0; t <= T; ++t) {
        s.alpha_bar[static_cast<size_t>(t)] = static_cast<double>(t) / T;
        s.beta_bar[static_cast<size_t>(t)] = static_cast<double>(t) / T;
    }
    s.alpha.resize(static_cast<size_t>(T) + 1, 0.0);
    s.beta.resize(static_cast<size_t>(T) + 1, 0.0);
    for (int t = 1; t <= T; ++t) {
        s.alpha[static_cast<size_t>(t)] =
            s.alpha_bar[static_cast<size_t>(t)] - s.alpha_bar[static_cast<size_t>(t) - 1];
        double b2 = s.beta_bar[static_cast<size_t>(t)] * s.beta_bar[static_cast<size_t>(t)] -
                    s.beta_bar[static_cast<size_t>(t) - 1] * s.beta_bar[static_cast<size_t>(t) - 1];
        s.beta[static_cast<size_t>(t)] = std::sqrt(std::max(b2, 0.0));
    }
    return s;
}

std::vector<double> diffuse_forward(const std::vector<double>& p0,
                                    const std::vector<double>& p_in, int t,
                                    const DiffusionSchedule& schedule,
                                    const std::vector<double>& eps) {
    if (p0.size() != p_in.size() || p0.size() != eps.size())
        throw MismatchError("diffuse_forward: shape mismatch");
    if (t < 0 || t > schedule.T)
        throw InvalidArgumentError("diffuse_forward: t outside [0, T]");
    if (t == 0) return p0;
    if (t == schedule.T) {
        // terminal state is P_in + eps by definition
        std::vector<double> out(p_in.size());
        for (size_t i = 0; i < out.size(); ++i) out[i] = p_in[i] + eps[i];
        return out;
    }
    double ab = schedule.alpha_bar[static_cast<size_t>(t)];
    double bb = schedule.beta_bar[static_cast<size_t>(t)];
    std::vector<double> out(p0.size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = p0[i] + ab * (p_in[i] - p0[i]) + bb * eps[i];
    return out;
}

std::vector<double> reverse_step(const std::vector<double>& p_t, int t,
                                 const std::vector<double>& p_in,
                                 const DenoiserFn& denoiser,
                                 const DiffusionSchedule& schedule) {
    if (t < 1 || t > schedule.T)
        throw InvalidArgumentError("reverse_step: t outside [1, T]");
    if (p_t.size() != p_in.size())
        throw MismatchError("reverse_step: shape mismatch");
    std::vector<double> res, eps;
    denoiser(p_t, t, p_in, res, eps);
    if (res.size() != p_t.size() || eps.size() != p_t.size())
        throw MismatchError("reverse_step: denoiser output shape mismatch");
    double da = schedule.alpha_bar[static_cast<size_t>(t)] -
                schedule.alpha_bar[static_cast<size_t>(t) - 1];
    double db = schedule.beta_bar[static_cast<size_t>(t)] -
                schedule.beta_bar[static_cast<size_t>(t) - 1];
    std::vector<double> out(p_t.size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = p_t[i] - da * res[i] - db * eps[i];
    return out;
}

// ---------------------------------------------------------------------------
// DRAT
// ---------------------------------------------------------------------------

DratParams estimate_drat(const std::vector<double>& p, double target_lo,
                         double target_hi) {
    if (p.empty()) throw InvalidArgumentError("estimate_drat: empty image");
    if (!(target_hi > target_lo))
        throw InvalidArgumentError("estimate_drat: degenerate target range");
    double mn = p[0], mx = p[0];
    for (double v : p) {
        if (!std::isfinite(v))
            throw InvalidArgumentError("estimate_drat: non-finite pixel");
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    DratParams d;
    double span = mx - mn;
    if (span <= 1e-12 * std::max({1.0, std::abs(mn), std::abs(mx)})) {
        // constant image: clamped gamma, midpoint target
        d.gamma = d.epsilon_floor;
        d.b = 0.5 * (target_lo + target_hi) - d.gamma * mn;
    } else {
        d.gamma = (target_hi - target_lo) / span;
        if (std::abs(d.gamma) < d.epsilon_floor)
            d.gamma = d.gamma < 0 ? -d.epsilon_floor : d.epsilon_floor;
        d.b = target_lo - d.gamma * mn;
    }
    return d;
}

std::vector<double> drat_apply(const std::vector<double>& p, const DratParams& drat) {
    if (std::abs(drat.gamma) < drat.epsilon_floor)
        throw InvalidArgumentError("drat_apply: |gamma| below epsilon_floor");
    std::vector<double> out(p.size());
    for (size_t i = 0; i < p.size(); ++i) out[i] = drat.gamma * p[i] + drat.b;
    return out;
}

std::vector<double> drat_invert(const std::vector<double>& p_scaled,
                                const DratParams& drat) {
    if (std::abs(drat.gamma) < drat.epsilon_floor)
        throw InvalidArgumentError("drat_invert: |gamma| below epsilon_floor");
    std::vector<double> out(p_scaled.size());
    double inv = 1.0 / drat.gamma;
    for (size_t i = 0; i < p_scaled.size(); ++i) out[i] = (p_scaled[i] - drat.b) * inv;
    return out;
}

// ---------------------------------------------------------------------------
// Denoiser network
// ---------------------------------------------------------------------------

void DenoiserConfig::validate() const {
    if (base_channels < 1)
        throw InvalidArgumentError("DenoiserConfig: base_channels must be >= 1");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
        throw InvalidArgumentError("DenoiserConfig: time_embed_dim must be even and >= 2");
}

namespace {

struct Layout {
    int C = 0, E = 0;
    size_t wt, bt, w1, b1, w2, b2, w3, b3, w4, b4, wr, br, we, be, total;
};

Layout make_layout(const DenoiserConfig& cfg) {
    Layout L;
    L.C = cfg.base_channels;
    L.E = cfg.time_embed_dim;
    size_t C = static_cast<size_t>(L.C), E = static_cast<size_t>(L.E);
    size_t o = 0;
    L.wt = o; o += 6 * C * E;
    L.bt = o; o += 6 * C;
    L.w1 = o; o += C * 2 * 9;
    L.b1 = o; o += C;
    L.w2 = o; o += 2 * C * C * 9;
    L.b2 = o; o += 2 * C;
    L.w3 = o; o += 2 * C * 2 * C * 9;
    L.b3 = o; o += 2 * C;
    L.w4 = o; o += C * 3 * C * 9;
    L.b4 = o; o += C;
    L.wr = o; o += C;
    L.br = o; o += 1;
    L.we = o; o += C;
    L.be = o; o += 1;
    L.total = o;
    return L;
}

void sinusoidal_embedding(int t, int E, double* out) {
    int half = E / 2;
    for (int k = 0; k < half; ++k) {
        double freq = std::pow(10000.0, -static_cast<double>(k) / half);
        out[2 * k] = std::sin(t * freq);
        out[2 * k + 1] = std::cos(t * freq);
    }
}

// 3x3 same-pad convolution. in: [IC,H,W], w: [OC,IC,3,3], bias/tbias: [OC].
// Output optionally ReLU'd in place.
template <typename S>
void conv3x3_forward(const S* in, int ic_n, int H, int W, const S* w, const S* bias,
                     const S* tbias, S* out, int oc_n, bool relu) {
    size_t plane = static_cast<size_t>(H) * W;
    for (int oc = 0; oc < oc_n; ++oc) {
        S base = bias[oc] + (tbias ? tbias[oc] : S(0));
        S* o = out + static_cast<size_t>(oc) * plane;
        for (size_t i = 0; i < plane; ++i) o[i] = base;
        for (int ic = 0; ic < ic_n; ++ic) {
            const S* src = in + static_cast<size_t>(ic) * plane;
            const S* wk = w + ((static_cast<size_t>(oc) * ic_n + ic) * 9);
            for (int ky = -1; ky <= 1; ++ky) {
                int y0 = std::max(0, -ky), y1 = H - 1 - std::max(0, ky);
                for (int kx = -1; kx <= 1; ++kx) {
                    S wv = wk[(ky + 1) * 3 + (kx + 1)];
                    if (wv == S(0)) continue;
                    int x0 = std::max(0, -kx), x1 = W - 1 - std::max(0, kx);
                    for (int y = y0; y <= y1; ++y) {
                        S* orow = o + static_cast<size_t>(y) * W;
                        const S* irow = src + static_cast<size_t>(y + ky) * W + kx;
                        for (int x = x0; x <= x1; ++x) orow[x] += wv * irow[x];
                    }
                }
            }
        }
        if (relu)
            for (size_t i = 0; i < plane; ++i)
                if (o[i] < S(0)) o[i] = S(0);
    }
}

// Backward through the same conv. d_out must already be masked by any
// activation. Accumulates into d_in (pre-zeroed), gw, gb and optionally gtb.
template <typename S>
void conv3x3_backward(const S* in, int ic_n, int H, int W, const S* w,
                      const S* d_out, int oc_n, S* d_in, S* gw, S* gb, S* gtb) {
    size_t plane = static_cast<size_t>(H) * W;
    for (int oc = 0; oc < oc_n; ++oc) {
        const S* dor = d_out + static_cast<size_t>(oc) * plane;
        S db = S(0);
        for (size_t i = 0; i < plane; ++i) db += dor[i];
        gb[oc] += db;
        if (gtb) gtb[oc] += db;
        for (int ic = 0; ic < ic_n; ++ic) {
            const S* src = in + static_cast<size_t>(ic) * plane;
            S* din = d_in ? d_in + static_cast<size_t>(ic) * plane : nullptr;
            const S* wk = w + ((static_cast<size_t>(oc) * ic_n + ic) * 9);
            S* gwk = gw + ((static_cast<size_t>(oc) * ic_n + ic) * 9);
            for (int ky = -1; ky <= 1; ++ky) {
                int y0 = std::max(0, -ky), y1 = H - 1 - std::max(0, ky);
                for (int kx = -1; kx <= 1; ++kx) {
                    int x0 = std::max(0, -kx), x1 = W - 1 - std::max(0, kx);
                    S wv = wk[(ky + 1) * 3 + (kx + 1)];
                    S acc = S(0);
                    for (int y = y0; y <= y1; ++y) {
                        const S* dro = dor + static_cast<size_t>(y) * W;
                        const S* irow = src + static_cast<size_t>(y + ky) * W + kx;
                        S* drow = din ? din + static_cast<size_t>(y + ky) * W + kx : nullptr;
                        for (int x = x0; x <= x1; ++x) {
                            acc += dro[x] * irow[x];
                            if (drow) drow[x] += wv * dro[x];
                        }
                    }
                    gwk[(ky + 1) * 3 + (kx + 1)] += acc;
                }
            }
        }
    }
}

template <typename S>
struct DenoiserWork {
    int H = 0, W = 0;
    std::vector<S> x, a1, pool, a2, a3, cat, a4, res, eps;
    std::vector<S> temb, tproj;
    std::vector<S> d_a4, d_cat, d_a3, d_a2, d_pool, d_a1, d_res, d_eps, d_tproj;

    void resize(const Layout& L, int rows, int cols) {
        H = rows;
        W = cols;
        size_t plane = static_cast<size_t>(H) * W;
        size_t plane2 = plane / 4;
        size_t C = static_cast<size_t>(L.C);
        x.assign(2 * plane, S(0));
        a1.assign(C * plane, S(0));
        pool.assign(C * plane2, S(0));
        a2.assign(2 * C * plane2, S(0));
        a3.assign(2 * C * plane2, S(0));
        cat.assign(3 * C * plane, S(0));
        a4.assign(C * plane, S(0));
        res.assign(plane, S(0));
        eps.assign(plane, S(0));
        temb.assign(static_cast<size_t>(L.E), S(0));
        tproj.assign(6 * C, S(0));
        d_a4.assign(C * plane, S(0));
        d_cat.assign(3 * C * plane, S(0));
        d_a3.assign(2 * C * plane2, S(0));
        d_a2.assign(2 * C * plane2, S(0));
        d_pool.assign(C * plane2, S(0));
        d_a1.assign(C * plane, S(0));
        d_res.assign(plane, S(0));
        d_eps.assign(plane, S(0));
        d_tproj.assign(6 * C, S(0));
    }
};

template <typename S>
void denoiser_forward(const DenoiserParamsT<S>& P, const Layout& L, int t,
                      DenoiserWork<S>& ws) {
    const S* d = P.data.data();
    const int C = L.C, H = ws.H, W = ws.W;
    const int H2 = H / 2, W2 = W / 2;
    size_t plane = static_cast<size_t>(H) * W;
    size_t plane2 = static_cast<size_t>(H2) * W2;

    std::vector<double> emb(static_cast<size_t>(L.E));
    sinusoidal_embedding(t, L.E, emb.data());
    for (int e = 0; e < L.E; ++e) ws.temb[static_cast<size_t>(e)] = static_cast<S>(emb[static_cast<size_t>(e)]);
    for (int j = 0; j < 6 * C; ++j) {
        S acc = d[L.bt + static_cast<size_t>(j)];
        const S* row = d + L.wt + static_cast<size_t>(j) * L.E;
        for (int e = 0; e < L.E; ++e) acc += row[e] * ws.temb[static_cast<size_t>(e)];
        ws.tproj[static_cast<size_t>(j)] = acc;
    }
    const S* tb1 = ws.tproj.data();
    const S* tb2 = ws.tproj.data() + C;
    const S* tb3 = ws.tproj.data() + 3 * C;
    const S* tb4 = ws.tproj.data() + 5 * C;

    conv3x3_forward(ws.x.data(), 2, H, W, d + L.w1, d + L.b1, tb1, ws.a1.data(), C, true);

    for (int c = 0; c < C; ++c) {
        const S* src = ws.a1.data() + static_cast<size_t>(c) * plane;
        S* dst = ws.pool.data() + static_cast<size_t>(c) * plane2;
        for (int y = 0; y < H2; ++y)
            for (int x = 0; x < W2; ++x)
                dst[static_cast<size_t>(y) * W2 + x] =
                    S(0.25) * (src[static_cast<size_t>(2 * y) * W + 2 * x] +
                               src[static_cast<size_t>(2 * y) * W + 2 * x + 1] +
                               src[static_cast<size_t>(2 * y + 1) * W + 2 * x] +
                               src[static_cast<size_t>(2 * y + 1) * W + 2 * x + 1]);
    }

    conv3x3_forward(ws.pool.data(), C, H2, W2, d + L.w2, d + L.b2, tb2, ws.a2.data(),
                    2 * C, true);
    conv3x3_forward(ws.a2.data(), 2 * C, H2, W2, d + L.w3, d + L.b3, tb3, ws.a3.data(),
                    2 * C, true);

    // nearest-neighbor upsample into the first 2C channels of cat; skip a1
    // into the last C channels
    for (int c = 0; c < 2 * C; ++c) {
        const S* src = ws.a3.data() + static_cast<size_t>(c) * plane2;
        S* dst = ws.cat.data() + static_cast<size_t>(c) * plane;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                dst[static_cast<size_t>(y) * W + x] =
                    src[static_cast<size_t>(y / 2) * W2 + x / 2];
    }
    std::memcpy(ws.cat.data() + static_cast<size_t>(2 * C) * plane, ws.a1.data(),
                sizeof(S) * static_cast<size_t>(C) * plane);

    conv3x3_forward(ws.cat.data(), 3 * C, H, W, d + L.w4, d + L.b4, tb4, ws.a4.data(),
                    C, true);

    // 1x1 heads
    for (size_t i = 0; i < plane; ++i) {
        ws.res[i] = d[L.br];
        ws.eps[i] = d[L.be];
    }
    for (int c = 0; c < C; ++c) {
        const S* a = ws.a4.data() + static_cast<size_t>(c) * plane;
        S wr = d[L.wr + static_cast<size_t>(c)];
        S we = d[L.we + static_cast<size_t>(c)];
        for (size_t i = 0; i < plane; ++i) {
            ws.res[i] += wr * a[i];
            ws.eps[i] += we * a[i];
        }
    }
}

// Backward from d_res/d_eps in ws; accumulates into grads (flat).
template <typename S>
void denoiser_backward(const DenoiserParamsT<S>& P, const Layout& L,
                       DenoiserWork<S>& ws, std::vector<S>& grads) {
    const S* d = P.data.data();
    S* g = grads.data();
    const int C = L.C, H = ws.H, W = ws.W;
    const int H2 = H / 2, W2 = W / 2;
    size_t plane = static_cast<size_t>(H) * W;
    size_t plane2 = static_cast<size_t>(H2) * W2;

    std::fill(ws.d_a4.begin(), ws.d_a4.end(), S(0));
    std::fill(ws.d_cat.begin(), ws.d_cat.end(), S(0));
    std::fill(ws.d_a3.begin(), ws.d_a3.end(), S(0));
    std::fill(ws.d_a2.begin(), ws.d_a2.end(), S(0));
    std::fill(ws.d_pool.begin(), ws.d_pool.end(), S(0));
    std::fill(ws.d_a1.begin(), ws.d_a1.end(), S(0));
    std::fill(ws.d_tproj.begin(), ws.d_tproj.end(), S(0));

    // heads
    for (int c = 0; c < C; ++c) {
        const S* a = ws.a4.data() + static_cast<size_t>(c) * plane;
        S* da = ws.d_a4.data() + static_cast<size_t>(c) * plane;
        S wr = d[L.wr + static_cast<size_t>(c)];
        S we = d[L.we + static_cast<size_t>(c)];
        S gwr = S(0), gwe = S(0);
        for (size_t i = 0; i < plane; ++i) {
            gwr += ws.d_res[i] * a[i];
            gwe += ws.d_eps[i] * a[i];
            da[i] += wr * ws.d_res[i] + we * ws.d_eps[i];
        }
        g[L.wr + static_cast<size_t>(c)] += gwr;
        g[L.we + static_cast<size_t>(c)] += gwe;
    }
    S gbr = S(0), gbe = S(0);
    for (size_t i = 0; i < plane; ++i) {
        gbr += ws.d_res[i];
        gbe += ws.d_eps[i];
    }
    g[L.br] += gbr;
    g[L.be] += gbe;

    // conv4 (mask by a4)
    for (size_t i = 0; i < static_cast<size_t>(C) * plane; ++i)
        if (!(ws.a4[i] > S(0))) ws.d_a4[i] = S(0);
    conv3x3_backward(ws.cat.data(), 3 * C, H, W, d + L.w4, ws.d_a4.data(), C,
                     ws.d_cat.data(), g + L.w4, g + L.b4, ws.d_tproj.data() + 5 * C);

    // split cat gradient: upsample part -> a3, skip part -> a1
    for (int c = 0; c < 2 * C; ++c) {
        const S* dc = ws.d_cat.data() + static_cast<size_t>(c) * plane;
        S* da3 = ws.d_a3.data() + static_cast<size_t>(c) * plane2;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                da3[static_cast<size_t>(y / 2) * W2 + x / 2] +=
                    dc[static_cast<size_t>(y) * W + x];
    }
    std::memcpy(ws.d_a1.data(), ws.d_cat.data() + static_cast<size_t>(2 * C) * plane,
                sizeof(S) * static_cast<size_t>(C) * plane);

    // conv3 (mask a3)
    for (size_t i = 0; i < static_cast<size_t>(2 * C) * plane2; ++i)
        if (!(ws.a3[i] > S(0))) ws.d_a3[i] = S(0);
    conv3x3_backward(ws.a2.data(), 2 * C, H2, W2, d + L.w3, ws.d_a3.data(), 2 * C,
                     ws.d_a2.data(), g + L.w3, g + L.b3, ws.d_tproj.data() + 3 * C);

    // conv2 (mask a2)
    for (size_t i = 0; i < static_cast<size_t>(2 * C) * plane2; ++i)
        if (!(ws.a2[i] > S(0))) ws.d_a2[i] = S(0);
    conv3x3_backward(ws.pool.data(), C, H2, W2, d + L.w2, ws.d_a2.data(), 2 * C,
                     ws.d_pool.data(), g + L.w2, g + L.b2, ws.d_tproj.data() + C);

    // avgpool backward into d_a1 (on top of the skip gradient)
    for (int c = 0; c < C; ++c) {
        const S* dp = ws.d_pool.data() + static_cast<size_t>(c) * plane2;
        S* da = ws.d_a1.data() + static_cast<size_t>(c) * plane;
        for (int y = 0; y < H2; ++y)
            for (int x = 0; x < W2; ++x) {
                S v = S(0.25) * dp[static_cast<size_t>(y) * W2 + x];
                da[static_cast<size_t>(2 * y) * W + 2 * x] += v;
                da[static_cast<size_t>(2 * y) * W + 2 * x + 1] += v;
                da[static_cast<size_t>(2 * y + 1) * W + 2 * x] += v;
                da[static_cast<size_t>(2 * y + 1) * W + 2 * x + 1] += v;
            }
    }

    // conv1 (mask a1); input gradient not needed
    for (size_t i = 0; i < static_cast<size_t>(C) * plane; ++i)
        if (!(ws.a1[i] > S(0))) ws.d_a1[i] = S(0);
    conv3x3_backward(ws.x.data(), 2, H, W, d + L.w1, ws.d_a1.data(), C,
                     static_cast<S*>(nullptr), g + L.w1, g + L.b1, ws.d_tproj.data());

    // time projection
    for (int j = 0; j < 6 * C; ++j) {
        S dt = ws.d_tproj[static_cast<size_t>(j)];
        if (dt == S(0)) continue;
        g[L.bt + static_cast<size_t>(j)] += dt;
        S* row = g + L.wt + static_cast<size_t>(j) * L.E;
        for (int e = 0; e < L.E; ++e) row[e] += dt * ws.temb[static_cast<size_t>(e)];
    }
}

void check_even_dims(int rows, int cols) {
    if (rows < 2 || cols < 2 || rows % 2 != 0 || cols % 2 != 0)
        throw InvalidArgumentError(
            "denoiser: projection resolution must be even in both axes (2x pooling)");
}

}  // namespace

template <typename S>
DenoiserParamsT<S> init_denoiser(const DenoiserConfig& config, uint64_t seed) {
    config.validate();
    Layout L = make_layout(config);
    DenoiserParamsT<S> p;
    p.config = config;
    p.data.assign(L.total, S(0));
    Rng rng(hash_combine(seed, 0x64656e6f));
    auto he_uniform = [&](size_t off, size_t n, int fan_in) {
        double limit = std::sqrt(6.0 / fan_in);
        for (size_t i = 0; i < n; ++i)
            p.data[off + i] = static_cast<S>(rng.next_uniform(-limit, limit));
    };
    size_t C = static_cast<size_t>(L.C), E = static_cast<size_t>(L.E);
    he_uniform(L.wt, 6 * C * E, L.E);
    he_uniform(L.w1, C * 2 * 9, 2 * 9);
    he_uniform(L.w2, 2 * C * C * 9, L.C * 9);
    he_uniform(L.w3, 2 * C * 2 * C * 9, 2 * L.C * 9);
    he_uniform(L.w4, C * 3 * C * 9, 3 * L.C * 9);
    // heads start at zero so the reverse process begins as the identity
    return p;
}

template <typename S>
void denoiser_apply(const DenoiserParamsT<S>& params, const std::vector<double>& p_t,
                    int t, const std::vector<double>& p_in, int rows, int cols,
                    std::vector<double>& res_out, std::vector<double>& eps_out) {
    check_even_dims(rows, cols);
    size_t plane = static_cast<size_t>(rows) * cols;
    if (p_t.size() != plane || p_in.size() != plane)
        throw MismatchError("denoiser_apply: image size does not match rows*cols");
    Layout L = make_layout(params.config);
    DenoiserWork<S> ws;
    ws.resize(L, rows, cols);
    for (size_t i = 0; i < plane; ++i) {
        ws.x[i] = static_cast<S>(p_t[i]);
        ws.x[plane + i] = static_cast<S>(p_in[i]);
    }
    denoiser_forward(params, L, t, ws);
    res_out.resize(plane);
    eps_out.resize(plane);
    for (size_t i = 0; i < plane; ++i) {
        res_out[i] = static_cast<double>(ws.res[i]);
        eps_out[i] = static_cast<double>(ws.eps[i]);
    }
}

template <typename S>
DenoiserFn make_denoiser_fn(const DenoiserParamsT<S>& params, int rows, int cols) {
    check_even_dims(rows, cols);
    DenoiserParamsT<S> copy = params;
    return [copy, rows, cols](const std::vector<double>& p_t, int t,
                              const std::vector<double>& p_in,
                              std::vector<double>& res, std::vector<double>& eps) {
        denoiser_apply(copy, p_t, t, p_in, rows, cols, res, eps);
    };
}

void DenoiserTrainConfig::validate() const {
    if (steps < 1) throw InvalidArgumentError("DenoiserTrainConfig: steps must be >= 1");
    if (batch < 1) throw InvalidArgumentError("DenoiserTrainConfig: batch must be >= 1");
    if (!(lr > 0.0)) throw InvalidArgumentError("DenoiserTrainConfig: lr must be > 0");
    if (!(lambda_res > 0.0 && lambda_eps > 0.0))
        throw InvalidArgumentError("DenoiserTrainConfig: lambdas must be > 0");
}

namespace {

struct DrawnSample {
    size_t pair = 0;
    int t = 1;
    std::vector<double> eps;
    std::vector<double> p_t;
};

// One forward/backward for a drawn sample; returns its loss contribution.
template <typename S>
double denoiser_sample_pass(const DenoiserParamsT<S>& params, const Layout& L,
                            const std::vector<ProjectionPair>& pairs,
                            const DrawnSample& s, int rows, int cols,
                            double lambda_res, double lambda_eps, double inv_batch,
                            DenoiserWork<S>& ws, std::vector<S>* grads) {
    size_t plane = static_cast<size_t>(rows) * cols;
    const ProjectionPair& pr = pairs[s.pair];
    for (size_t i = 0; i < plane; ++i) {
        ws.x[i] = static_cast<S>(s.p_t[i]);
        ws.x[plane + i] = static_cast<S>(pr.degraded[i]);
    }
    denoiser_forward(params, L, s.t, ws);

    double inv_n = 1.0 / static_cast<double>(plane);
    double loss_res = 0.0, loss_eps = 0.0;
    for (size_t i = 0; i < plane; ++i) {
        double res_true = pr.degraded[i] - pr.clean[i];
        double dr = res_true - static_cast<double>(ws.res[i]);
        double de = s.eps[i] - static_cast<double>(ws.eps[i]);
        loss_res += dr * dr;
        loss_eps += de * de;
        if (grads) {
            ws.d_res[i] = static_cast<S>(-2.0 * lambda_res * dr * inv_n * inv_batch);
            ws.d_eps[i] = static_cast<S>(-2.0 * lambda_eps * de * inv_n * inv_batch);
        }
    }
    if (grads) denoiser_backward(params, L, ws, *grads);
    return (lambda_res * loss_res + lambda_eps * loss_eps) * inv_n;
}

}  // namespace

template <typename S>
DenoiserTrainResultT<S> train_denoiser(const std::vector<ProjectionPair>& pairs,
                                       int rows, int cols,
                                       const DiffusionSchedule& schedule,
                                       const DenoiserTrainConfig& config,
                                       const DenoiserParamsT<S>* init) {
    config.validate();
    check_even_dims(rows, cols);
    if (pairs.empty())
        throw InvalidArgumentError("train_denoiser: needs at least one pair");
    size_t plane = static_cast<size_t>(rows) * cols;
    for (const auto& p : pairs)
        if (p.clean.size() != plane || p.degraded.size() != plane)
            throw MismatchError("train_denoiser: pair size does not match rows*cols");

    DenoiserTrainResultT<S> result;
    result.params = init ? *init : init_denoiser<S>(DenoiserConfig{}, config.seed);
    Layout L = make_layout(result.params.config);

    std::vector<S> grads(L.total, S(0));
    std::vector<S> m(L.total, S(0)), v(L.total, S(0));
    std::vector<std::vector<S>> slot_grads(kNumSlots, std::vector<S>(L.total, S(0)));
    std::vector<DenoiserWork<S>> slot_ws(static_cast<size_t>(kNumSlots));
    for (auto& w : slot_ws) w.resize(L, rows, cols);

    Rng master(hash_combine(config.seed, 0x64727072));
    std::vector<DrawnSample> batch(static_cast<size_t>(config.batch));
    int64_t adam_t = 0;
    constexpr double b1 = 0.9, b2 = 0.999, eps_adam = 1e-8;

    for (int step = 0; step < config.steps; ++step) {
        for (int i = 0; i < config.batch; ++i) {
            DrawnSample& s = batch[static_cast<size_t>(i)];
            s.pair = master.next_below(pairs.size());
            s.t = 1 + static_cast<int>(master.next_below(static_cast<uint64_t>(schedule.T)));
            s.eps.resize(plane);
            for (size_t j = 0; j < plane; ++j) s.eps[j] = master.next_normal();
            s.p_t = diffuse_forward(pairs[s.pair].clean, pairs[s.pair].degraded, s.t,
                                    schedule, s.eps);
        }

        std::array<double, kNumSlots> slot_loss{};
        #pragma omp parallel for schedule(dynamic, 1)
        for (int slot = 0; slot < kNumSlots; ++slot) {
            auto [lo, hi] = slot_range(batch.size(), slot);
            std::fill(slot_grads[static_cast<size_t>(slot)].begin(),
                      slot_grads[static_cast<size_t>(slot)].end(), S(0));
            double local = 0.0;
            for (size_t i = lo; i < hi; ++i)
                local += denoiser_sample_pass(result.params, L, pairs, batch[i], rows,
                                              cols, config.lambda_res, config.lambda_eps,
                                              1.0 / config.batch,
                                              slot_ws[static_cast<size_t>(slot)],
                                              &slot_grads[static_cast<size_t>(slot)]);
            slot_loss[static_cast<size_t>(slot)] = local;
        }
        double loss = 0.0;
        for (int s = 0; s < kNumSlots; ++s) loss += slot_loss[static_cast<size_t>(s)];
        loss /= config.batch;
        if (!std::isfinite(loss))
            throw DivergenceError("train_denoiser: non-finite loss at step " +
                                  std::to_string(step));
        result.losses.push_back(loss);

        #pragma omp parallel for schedule(static)
        for (long long j = 0; j < static_cast<long long>(L.total); ++j) {
            S acc = S(0);
            for (int s = 0; s < kNumSlots; ++s)
                acc += slot_grads[static_cast<size_t>(s)][static_cast<size_t>(j)];
            grads[static_cast<size_t>(j)] = acc;
        }

        adam_t += 1;
        double bc1 = 1.0 - std::pow(b1, static_cast<double>(adam_t));
        double bc2 = 1.0 - std::pow(b2, static_cast<double>(adam_t));
        S* pp = result.params.data.data();
        #pragma omp parallel for schedule(static)
        for (long long j = 0; j < static_cast<long long>(L.total); ++j) {
            double gj = static_cast<double>(grads[static_cast<size_t>(j)]);
            double mj = b1 * static_cast<double>(m[static_cast<size_t>(j)]) + (1.0 - b1) * gj;
            double vj = b2 * static_cast<double>(v[static_cast<size_t>(j)]) + (1.0 - b2) * gj * gj;
            m[static_cast<size_t>(j)] = static_cast<S>(mj);
            v[static_cast<size_t>(j)] = static_cast<S>(vj);
            double step_j = config.lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps_adam);
            pp[j] = static_cast<S>(static_cast<double>(pp[j]) - step_j);
        }
    }
    return result;
}

template <typename S>
double denoiser_objective(const DenoiserParamsT<S>& params,
                          const std::vector<ProjectionPair>& pairs, int rows,
                          int cols, const DiffusionSchedule& schedule,
                          double lambda_res, double lambda_eps, uint64_t seed,
                          int n_draws) {
    check_even_dims(rows, cols);
    if (pairs.empty() || n_draws < 1)
        throw InvalidArgumentError("denoiser_objective: empty input");
    Layout L = make_layout(params.config);
    size_t plane = static_cast<size_t>(rows) * cols;
    Rng rng(hash_combine(seed, 0x76616c69));
    DenoiserWork<S> ws;
    ws.resize(L, rows, cols);
    double total = 0.0;
    for (int i = 0; i < n_draws; ++i) {
        DrawnSample s;
        s.pair = rng.next_below(pairs.size());
        s.t = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(schedule.T)));
        s.eps.resize(plane);
        for (size_t j = 0; j < plane; ++j) s.eps[j] = rng.next_normal();
        s.p_t = diffuse_forward(pairs[s.pair].clean, pairs[s.pair].degraded, s.t,
                                schedule, s.eps);
        total += denoiser_sample_pass(params, L, pairs, s, rows, cols, lambda_res,
                                      lambda_eps, 1.0, ws,
                                      static_cast<std::vector<S>*>(nullptr));
    }
    return total / n_draws;
}

template <typename S>
double denoiser_loss_and_gradients(const DenoiserParamsT<S>& params,
                                   const ProjectionPair& pair, int t,
                                   const std::vector<double>& eps, int rows,
                                   int cols, const DiffusionSchedule& schedule,
                                   double lambda_res, double lambda_eps,
                                   std::vector<S>& grads) {
    check_even_dims(rows, cols);
    Layout L = make_layout(params.config);
    grads.assign(L.total, S(0));
    DenoiserWork<S> ws;
    ws.resize(L, rows, cols);
    DrawnSample s;
    s.pair = 0;
    s.t = t;
    s.eps = eps;
    s.p_t = diffuse_forward(pair.clean, pair.degraded, t, schedule, eps);
    std::vector<ProjectionPair> pairs{pair};
    return denoiser_sample_pass(params, L, pairs, s, rows, cols, lambda_res,
                                lambda_eps, 1.0, ws, &grads);
}

// ---------------------------------------------------------------------------
// Refinement
// ---------------------------------------------------------------------------

namespace {

ProjectionImage refine_core(const ProjectionImage& synthetic, double gamma, double b,
                            const DenoiserFn& denoiser,
                            const DiffusionSchedule& schedule, uint64_t seed,
                            bool add_noise) {
    check_even_dims(synthetic.rows, synthetic.cols);
    DratParams affine;
    affine.gamma = gamma;
    affine.b = b;
    affine.epsilon_floor = 0.0;  // estimate_drat already enforces its floor
    std::vector<double> p_in = drat_apply(synthetic.pixels, affine);

    std::vector<double> p(p_in.size());
    if (add_noise) {
        Rng rng(hash_combine(seed, 0x726e6f69));
        for (size_t i = 0; i < p.size(); ++i) p[i] = p_in[i] + rng.next_normal();
    } else {
        p = p_in;
    }
    for (int t = schedule.T; t >= 1; --t) p = reverse_step(p, t, p_in, denoiser, schedule);

    ProjectionImage out = synthetic;
    out.pixels = drat_invert(p, affine);
    out.provenance = Provenance::pseudo;
    for (double v : out.pixels)
        if (!std::isfinite(v))
            throw DivergenceError("refine_projection: non-finite refined pixel");
    return out;
}

}  // namespace

ProjectionImage refine_projection(const ProjectionImage& synthetic,
                                  const DenoiserFn& denoiser,
                                  const DiffusionSchedule& schedule, uint64_t seed,
                                  bool add_noise) {
    DratParams d = estimate_drat(synthetic.pixels);
    return refine_core(synthetic, d.gamma, d.b, denoiser, schedule, seed, add_noise);
}

ProjectionImage refine_projection_fixed_scale(const ProjectionImage& synthetic,
                                              double gamma, double b,
                                              const DenoiserFn& denoiser,
                                              const DiffusionSchedule& schedule,
                                              uint64_t seed, bool add_noise) {
    if (gamma == 0.0)
        throw InvalidArgumentError("refine_projection_fixed_scale: gamma must be nonzero");
    return refine_core(synthetic, gamma, b, denoiser, schedule, seed, add_noise);
}

template struct DenoiserParamsT<float>;
template struct DenoiserParamsT<double>;

#define DIFFNAF_INST_DENOISER(S)                                                     \
    template DenoiserParamsT<S> init_denoiser<S>(const DenoiserConfig&, uint64_t);   \
    template void denoiser_apply<S>(const DenoiserParamsT<S>&,                       \
                                    const std::vector<double>&, int,                 \
                                    const std::vector<double>&, int, int,            \
                                    std::vector<double>&, std::vector<double>&);     \
    template DenoiserFn make_denoiser_fn<S>(const DenoiserParamsT<S>&, int, int);    \
    template DenoiserTrainResultT<S> train_denoiser<S>(                              \
        const std::vector<ProjectionPair>&, int, int, const DiffusionSchedule&,      \
        const DenoiserTrainConfig&, const DenoiserParamsT<S>*);                      \
    template double denoiser_objective<S>(const DenoiserParamsT<S>&,                 \
                                          const std::vector<ProjectionPair>&, int,   \
                                          int, const DiffusionSchedule&, double,     \
                                          double, uint64_t, int);                    \
    template double denoiser_loss_and_gradients<S>(                                  \
        const DenoiserParamsT<S>&, const ProjectionPair&, int,                       \
        const std::vector<double>&, int, int, const DiffusionSchedule&, double,      \
        double, std::vector<S>&);

DIFFNAF_INST_DENOISER(float)
DIFFNAF_INST_DENOISER(double)
#undef DIFFNAF_INST_DENOISER

}  // namespace diffnaf
