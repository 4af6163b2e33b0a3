#pragma once

#include <cmath>
#include <vector>

#include "cellgan/ops.hpp"
#include "cellgan/params.hpp"
#include "cellgan/rng.hpp"

namespace cellgan {

// ---------------------------------------------------------------------------
// spectral normalization
// ---------------------------------------------------------------------------

/// Power-iteration state for one weight. Only the left vector u persists;
/// the right vector v is recomputed from the current weight on every use.
template <typename T>
struct PowerIterState {
    std::vector<T> u;
    int n_iters = 1;

    void init(const Tensor<T>& w, Rng& rng) {
        u.assign(static_cast<size_t>(w.dim(0)), T(0));
        double norm = 0.0;
        for (auto& e : u) {
            e = static_cast<T>(rng.normal());
            norm += static_cast<double>(e) * e;
        }
        norm = std::sqrt(norm);
        for (auto& e : u) e = static_cast<T>(e / norm);
    }
};

namespace detail {

/// Power iterations on w viewed as [dim0, rest]. Fills v, optionally updates
/// u in place, returns the sigma estimate (>= 0). A degenerate weight (norm
/// collapse) returns 0 and leaves u untouched.
template <typename T>
inline T power_iterate(const Tensor<T>& w, std::vector<T>& u, std::vector<T>& v, int iters,
                       bool update_u) {
    const int R = w.dim(0);
    const int C = static_cast<int>(w.size()) / R;
    if (static_cast<int>(u.size()) != R) throw state_error("power_iterate: u size mismatch");
    v.assign(static_cast<size_t>(C), T(0));
    std::vector<T> u_next(static_cast<size_t>(R));
    const int rounds = update_u ? std::max(1, iters) : 1;
    for (int it = 0; it < rounds; ++it) {
        // v = normalize(W^T u)
        double vn = 0.0;
        for (int c = 0; c < C; ++c) {
            T acc = 0;
            for (int r = 0; r < R; ++r) acc += w[static_cast<size_t>(r) * C + c] * u[r];
            v[static_cast<size_t>(c)] = acc;
            vn += static_cast<double>(acc) * acc;
        }
        vn = std::sqrt(vn);
        if (vn < 1e-20) return T(0);
        for (auto& e : v) e = static_cast<T>(e / vn);
        if (!update_u) break;
        // u = normalize(W v)
        double un = 0.0;
        for (int r = 0; r < R; ++r) {
            T acc = 0;
            const T* row = w.data() + static_cast<size_t>(r) * C;
            for (int c = 0; c < C; ++c) acc += row[c] * v[static_cast<size_t>(c)];
            u_next[static_cast<size_t>(r)] = acc;
            un += static_cast<double>(acc) * acc;
        }
        un = std::sqrt(un);
        if (un < 1e-20) return T(0);
        for (int r = 0; r < R; ++r) u[static_cast<size_t>(r)] = static_cast<T>(u_next[r] / un);
    }
    // sigma = u^T W v
    T sigma = 0;
    for (int r = 0; r < R; ++r) {
        T acc = 0;
        const T* row = w.data() + static_cast<size_t>(r) * C;
        for (int c = 0; c < C; ++c) acc += row[c] * v[static_cast<size_t>(c)];
        sigma += u[static_cast<size_t>(r)] * acc;
    }
    return sigma;
}

}  // namespace detail

/// Tensor-level spectral normalization: update the state's power iteration
/// and return W / sigma. A zero (or numerically collapsed) weight is
/// returned unchanged with the state untouched.
template <typename T>
inline Tensor<T> spectral_normalize(const Tensor<T>& w, PowerIterState<T>& st) {
    std::vector<T> u = st.u;  // roll back on degeneracy
    std::vector<T> v;
    const T sigma = detail::power_iterate(w, u, v, st.n_iters, true);
    if (sigma < T(1e-12)) return w;
    st.u = std::move(u);
    Tensor<T> out(w.shape());
    for (size_t i = 0; i < w.size(); ++i) out[i] = w[i] / sigma;
    return out;
}

/// Graph binding: emit param / sigma with sigma from the state's power
/// iteration. `update` advances u (training D) or leaves it frozen
/// (generator step, evaluation).
template <typename T>
inline Value bind_spectral(Graph<T>& g, ParamStore<T>& store, int pid, PowerIterState<T>& st,
                           bool update) {
    const Tensor<T>& w = store.at(pid).value;
    if (st.u.empty()) throw state_error("bind_spectral: power iteration not initialized");
    std::vector<T> u = st.u;
    std::vector<T> v;
    const T sigma = detail::power_iterate(w, u, v, st.n_iters, update);
    Value wp = g.param(store, pid);
    if (sigma < T(1e-12)) return wp;  // degenerate: pass through unscaled
    if (update) st.u = std::move(u);
    return spectral_scale(g, wp, update ? st.u : u, v);
}

// ---------------------------------------------------------------------------
// EMA
// ---------------------------------------------------------------------------

template <typename T>
inline void ema_update(Tensor<T>& ema, const Tensor<T>& current, T decay) {
    if (!ema.same_shape(current)) throw domain_error("ema_update: shape mismatch");
    if (decay < T(0) || decay >= T(1)) throw domain_error("ema_update: decay must be in [0,1)");
    for (size_t i = 0; i < ema.size(); ++i)
        ema[i] = decay * ema[i] + (T(1) - decay) * current[i];
}

template <typename T>
inline void ema_update(ParamStore<T>& ema, const ParamStore<T>& current, T decay) {
    if (ema.count() != current.count()) throw domain_error("ema_update: store size mismatch");
    for (int i = 0; i < static_cast<int>(ema.count()); ++i)
        ema_update(ema.at(i).value, current.at(i).value, decay);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Standard bias-corrected Adam over a ParamStore's gradients.
/// Moment tensors are exposed for checkpointing.
template <typename T>
class Adam {
public:
    Adam(T lr, T beta1, T beta2, T eps = T(1e-8))
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (lr <= T(0)) throw domain_error("adam: lr must be positive");
    }

    void step(ParamStore<T>& store) {
        ensure_state(store);
        ++t;
        const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1_), t));
        const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2_), t));
        for (int i = 0; i < static_cast<int>(store.count()); ++i) {
            auto& p = store.at(i);
            Tensor<T>& mi = m[static_cast<size_t>(i)];
            Tensor<T>& vi = v[static_cast<size_t>(i)];
            for (size_t k = 0; k < p.value.size(); ++k) {
                const T gk = p.grad[k];
                mi[k] = beta1_ * mi[k] + (T(1) - beta1_) * gk;
                vi[k] = beta2_ * vi[k] + (T(1) - beta2_) * gk * gk;
                p.value[k] -= lr_ * (mi[k] / bc1) / (std::sqrt(vi[k] / bc2) + eps_);
            }
        }
    }

    T lr() const { return lr_; }

    std::vector<Tensor<T>> m, v;  // first/second moments, store order
    long long t = 0;

    void ensure_state(const ParamStore<T>& store) {
        if (m.empty()) {
            for (int i = 0; i < static_cast<int>(store.count()); ++i) {
                m.push_back(Tensor<T>(store.at(i).value.shape()));
                v.push_back(Tensor<T>(store.at(i).value.shape()));
            }
        }
        if (m.size() != store.count()) throw state_error("adam: store/optimizer size mismatch");
    }

private:
    T lr_, beta1_, beta2_, eps_;
};

// ---------------------------------------------------------------------------
// differentiable augmentation
// ---------------------------------------------------------------------------

/// Augmentation policy with the standard magnitudes: brightness shift within
/// +-0.5, saturation scale in [0,2], contrast scale in [0.5,1.5], translation
/// up to 1/8 of the extent, cutout square of half the extent.
struct AugmentPolicy {
    bool color = true;
    bool translation = true;
    bool cutout = true;
    double brightness = 0.5;
    double saturation_lo = 0.0, saturation_hi = 2.0;
    double contrast_lo = 0.5, contrast_hi = 1.5;

    bool any() const { return color || translation || cutout; }

    void validate() const {
        if (brightness < 0.0 || brightness > 0.5)
            throw config_error("augment: brightness shift must be in [0, 0.5]");
        if (saturation_lo < 0.0 || saturation_hi > 2.0 || saturation_lo > saturation_hi)
            throw config_error("augment: saturation range must be within [0, 2]");
        if (contrast_lo < 0.5 || contrast_hi > 1.5 || contrast_lo > contrast_hi)
            throw config_error("augment: contrast range must be within [0.5, 1.5]");
    }
};

/// y[b] = x[b] + amount[b] (per-sample brightness shift).
template <typename T>
inline Value brightness_shift(Graph<T>& g, Value x, const std::vector<T>& amount) {
    const Tensor<T>& xv = g.val(x);
    if (static_cast<int>(amount.size()) != xv.dim(0))
        throw domain_error("brightness_shift: amount size != batch");
    Tensor<T> out(xv.shape());
    const size_t per = xv.size() / static_cast<size_t>(xv.dim(0));
    for (int b = 0; b < xv.dim(0); ++b)
        for (size_t k = 0; k < per; ++k)
            out[static_cast<size_t>(b) * per + k] = xv[static_cast<size_t>(b) * per + k] + amount[b];
    // identity jacobian, same as scaling by 1
    return g.emit(std::make_unique<AffineScalarOp<T>>(T(1)), {x.id}, std::move(out));
}

/// Per-pixel channel mean mu; y = mu + s[b] * (x - mu).
template <typename T>
struct SaturationOp : Op<T> {
    std::vector<T> s;
    explicit SaturationOp(std::vector<T> sv) : s(std::move(sv)) {}
    const char* name() const override { return "saturation_scale"; }
    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        if (!g.wants(n.in[0])) return;
        const Tensor<T>& dy = g.grad(node);
        Tensor<T>& dx = g.grad(n.in[0]);
        const int B = dy.dim(0), C = dy.dim(1), S = dy.dim(2) * dy.dim(3);
        for (int b = 0; b < B; ++b) {
            const T sb = s[static_cast<size_t>(b)];
            for (int p = 0; p < S; ++p) {
                T colsum = 0;
                for (int c = 0; c < C; ++c) colsum += dy[(static_cast<size_t>(b) * C + c) * S + p];
                const T shared = (T(1) - sb) / static_cast<T>(C) * colsum;
                for (int c = 0; c < C; ++c) {
                    const size_t i = (static_cast<size_t>(b) * C + c) * S + p;
                    dx[i] += sb * dy[i] + shared;
                }
            }
        }
    }
};

template <typename T>
inline Value saturation_scale(Graph<T>& g, Value x, const std::vector<T>& s) {
    const Tensor<T>& xv = g.val(x);
    if (static_cast<int>(s.size()) != xv.dim(0))
        throw domain_error("saturation_scale: scale size != batch");
    const int B = xv.dim(0), C = xv.dim(1), S = xv.dim(2) * xv.dim(3);
    Tensor<T> out(xv.shape());
    for (int b = 0; b < B; ++b)
        for (int p = 0; p < S; ++p) {
            T mu = 0;
            for (int c = 0; c < C; ++c) mu += xv[(static_cast<size_t>(b) * C + c) * S + p];
            mu /= static_cast<T>(C);
            for (int c = 0; c < C; ++c) {
                const size_t i = (static_cast<size_t>(b) * C + c) * S + p;
                out[i] = mu + s[static_cast<size_t>(b)] * (xv[i] - mu);
            }
        }
    return g.emit(std::make_unique<SaturationOp<T>>(s), {x.id}, std::move(out));
}

/// Per-sample global mean mu; y = mu + c[b] * (x - mu).
template <typename T>
struct ContrastOp : Op<T> {
    std::vector<T> c;
    explicit ContrastOp(std::vector<T> cv) : c(std::move(cv)) {}
    const char* name() const override { return "contrast_scale"; }
    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        if (!g.wants(n.in[0])) return;
        const Tensor<T>& dy = g.grad(node);
        Tensor<T>& dx = g.grad(n.in[0]);
        const int B = dy.dim(0);
        const size_t per = dy.size() / static_cast<size_t>(B);
        for (int b = 0; b < B; ++b) {
            const T cb = c[static_cast<size_t>(b)];
            T sum = 0;
            for (size_t k = 0; k < per; ++k) sum += dy[static_cast<size_t>(b) * per + k];
            const T shared = (T(1) - cb) / static_cast<T>(per) * sum;
            for (size_t k = 0; k < per; ++k) {
                const size_t i = static_cast<size_t>(b) * per + k;
                dx[i] += cb * dy[i] + shared;
            }
        }
    }
};

template <typename T>
inline Value contrast_scale(Graph<T>& g, Value x, const std::vector<T>& c) {
    const Tensor<T>& xv = g.val(x);
    if (static_cast<int>(c.size()) != xv.dim(0))
        throw domain_error("contrast_scale: scale size != batch");
    const int B = xv.dim(0);
    const size_t per = xv.size() / static_cast<size_t>(B);
    Tensor<T> out(xv.shape());
    for (int b = 0; b < B; ++b) {
        T mu = 0;
        for (size_t k = 0; k < per; ++k) mu += xv[static_cast<size_t>(b) * per + k];
        mu /= static_cast<T>(per);
        for (size_t k = 0; k < per; ++k) {
            const size_t i = static_cast<size_t>(b) * per + k;
            out[i] = mu + c[static_cast<size_t>(b)] * (xv[i] - mu);
        }
    }
    return g.emit(std::make_unique<ContrastOp<T>>(c), {x.id}, std::move(out));
}

/// Integer-pixel translation with zero padding:
/// y[b,c,i,j] = x[b,c,i-ty[b],j-tx[b]] where defined, else 0.
template <typename T>
struct TranslateOp : Op<T> {
    std::vector<int> tx, ty;
    TranslateOp(std::vector<int> x, std::vector<int> y) : tx(std::move(x)), ty(std::move(y)) {}
    const char* name() const override { return "translate2d"; }
    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        if (!g.wants(n.in[0])) return;
        const Tensor<T>& dy = g.grad(node);
        Tensor<T>& dx = g.grad(n.in[0]);
        const int B = dy.dim(0), C = dy.dim(1), H = dy.dim(2), W = dy.dim(3);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < H; ++i) {
                    const int si = i - ty[static_cast<size_t>(b)];
                    if (si < 0 || si >= H) continue;
                    for (int j = 0; j < W; ++j) {
                        const int sj = j - tx[static_cast<size_t>(b)];
                        if (sj >= 0 && sj < W) dx.at(b, c, si, sj) += dy.at(b, c, i, j);
                    }
                }
    }
};

template <typename T>
inline Value translate2d(Graph<T>& g, Value x, const std::vector<int>& tx,
                         const std::vector<int>& ty) {
    const Tensor<T>& xv = g.val(x);
    const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (static_cast<int>(tx.size()) != B || static_cast<int>(ty.size()) != B)
        throw domain_error("translate2d: shift sizes != batch");
    Tensor<T> out(xv.shape());
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H; ++i) {
                const int si = i - ty[static_cast<size_t>(b)];
                if (si < 0 || si >= H) continue;
                for (int j = 0; j < W; ++j) {
                    const int sj = j - tx[static_cast<size_t>(b)];
                    if (sj >= 0 && sj < W) out.at(b, c, i, j) = xv.at(b, c, si, sj);
                }
            }
    return g.emit(std::make_unique<TranslateOp<T>>(tx, ty), {x.id}, std::move(out));
}

/// Zero out a per-sample h x w window with top-left corner (r0[b], c0[b])
/// (window fully inside the image). Implemented as a constant-mask product.
template <typename T>
inline Value cutout_zero(Graph<T>& g, Value x, const std::vector<int>& r0,
                         const std::vector<int>& c0, int h, int w) {
    const Tensor<T>& xv = g.val(x);
    const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (static_cast<int>(r0.size()) != B || static_cast<int>(c0.size()) != B)
        throw domain_error("cutout_zero: corner sizes != batch");
    Tensor<T> mask = Tensor<T>::full(xv.shape(), T(1));
    for (int b = 0; b < B; ++b) {
        if (r0[static_cast<size_t>(b)] < 0 || r0[static_cast<size_t>(b)] + h > H ||
            c0[static_cast<size_t>(b)] < 0 || c0[static_cast<size_t>(b)] + w > W)
            throw domain_error("cutout_zero: window out of bounds");
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j)
                    mask.at(b, c, r0[static_cast<size_t>(b)] + i, c0[static_cast<size_t>(b)] + j) =
                        T(0);
    }
    return mul(g, x, g.constant(std::move(mask)));
}

/// Apply the policy with per-sample independent draws. Draw order is fixed
/// (and therefore checkpoint-stable): brightness, saturation, contrast
/// (one uniform per sample each), then per sample (ty, tx), then per sample
/// (r0, c0) for cutout.
template <typename T>
inline Value diff_augment(Graph<T>& g, Value imgs, const AugmentPolicy& p, Rng& rng) {
    const Tensor<T>& xv = g.val(imgs);
    const int B = xv.dim(0), H = xv.dim(2), W = xv.dim(3);
    Value cur = imgs;
    if (p.color) {
        std::vector<T> bshift(static_cast<size_t>(B)), sat(static_cast<size_t>(B)),
            con(static_cast<size_t>(B));
        for (auto& e : bshift) e = static_cast<T>(rng.uniform(-p.brightness, p.brightness));
        for (auto& e : sat) e = static_cast<T>(rng.uniform(p.saturation_lo, p.saturation_hi));
        for (auto& e : con) e = static_cast<T>(rng.uniform(p.contrast_lo, p.contrast_hi));
        cur = brightness_shift(g, cur, bshift);
        cur = saturation_scale(g, cur, sat);
        cur = contrast_scale(g, cur, con);
    }
    if (p.translation) {
        const int mh = H / 8, mw = W / 8;
        std::vector<int> ty(static_cast<size_t>(B)), tx(static_cast<size_t>(B));
        for (int b = 0; b < B; ++b) {
            ty[static_cast<size_t>(b)] = rng.uniform_int(2 * mh + 1) - mh;
            tx[static_cast<size_t>(b)] = rng.uniform_int(2 * mw + 1) - mw;
        }
        cur = translate2d(g, cur, tx, ty);
    }
    if (p.cutout) {
        const int h2 = H / 2, w2 = W / 2;
        std::vector<int> r0(static_cast<size_t>(B)), c0(static_cast<size_t>(B));
        for (int b = 0; b < B; ++b) {
            r0[static_cast<size_t>(b)] = rng.uniform_int(H - h2 + 1);
            c0[static_cast<size_t>(b)] = rng.uniform_int(W - w2 + 1);
        }
        cur = cutout_zero(g, cur, r0, c0, h2, w2);
    }
    return cur;
}

}  // namespace cellgan
