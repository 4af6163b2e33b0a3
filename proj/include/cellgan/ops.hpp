#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "cellgan/gemm.hpp"
#include "cellgan/graph.hpp"

namespace cellgan {
namespace detail {

// ---------------------------------------------------------------------------
// shared convolution kernels (per-sample im2col + GEMM; k=1 skips the col)
// ---------------------------------------------------------------------------

template <typename T>
struct ConvScratch {
    std::vector<T> col;
    T* get(size_t n) {
        if (col.size() < n) col.resize(n);
        return col.data();
    }
};

template <typename T>
inline void conv_forward(const Tensor<T>& x, const Tensor<T>& w, const T* bias, const ConvGeom& g,
                         Tensor<T>& out, ConvScratch<T>& scratch, bool accum) {
    const int B = x.dim(0), Co = w.dim(0), S = g.out_h() * g.out_w(), P = g.patch();
    const bool direct = (g.k == 1 && g.stride == 1 && g.pad == 0);
    T* colbuf = direct ? nullptr : scratch.get(static_cast<size_t>(P) * S);
    for (int b = 0; b < B; ++b) {
        const T* xb = x.data() + static_cast<size_t>(b) * g.in_c * g.in_h * g.in_w;
        const T* col = xb;
        if (!direct) {
            im2col(xb, g, colbuf);
            col = colbuf;
        }
        T* ob = out.data() + static_cast<size_t>(b) * Co * S;
        gemm(false, false, Co, S, P, T(1), w.data(), P, col, S, accum ? T(1) : T(0), ob, S);
        if (bias)
            for (int c = 0; c < Co; ++c) {
                T* oc = ob + static_cast<size_t>(c) * S;
                for (int s = 0; s < S; ++s) oc[s] += bias[c];
            }
    }
}

template <typename T>
inline void conv_backward_data(const Tensor<T>& dout, const Tensor<T>& w, const ConvGeom& g,
                               Tensor<T>& dx, ConvScratch<T>& scratch) {
    const int B = dx.dim(0), Co = w.dim(0), S = g.out_h() * g.out_w(), P = g.patch();
    const bool direct = (g.k == 1 && g.stride == 1 && g.pad == 0);
    T* colbuf = direct ? nullptr : scratch.get(static_cast<size_t>(P) * S);
    for (int b = 0; b < B; ++b) {
        const T* db = dout.data() + static_cast<size_t>(b) * Co * S;
        T* dxb = dx.data() + static_cast<size_t>(b) * g.in_c * g.in_h * g.in_w;
        if (direct) {
            gemm(true, false, P, S, Co, T(1), w.data(), P, db, S, T(1), dxb, S);
        } else {
            gemm(true, false, P, S, Co, T(1), w.data(), P, db, S, T(0), colbuf, S);
            col2im_add(colbuf, g, dxb);
        }
    }
}

template <typename T>
inline void conv_backward_weight(const Tensor<T>& dout, const Tensor<T>& x, const ConvGeom& g,
                                 Tensor<T>& dw, T* dbias, ConvScratch<T>& scratch) {
    const int B = x.dim(0), Co = dw.dim(0), S = g.out_h() * g.out_w(), P = g.patch();
    const bool direct = (g.k == 1 && g.stride == 1 && g.pad == 0);
    T* colbuf = direct ? nullptr : scratch.get(static_cast<size_t>(P) * S);
    for (int b = 0; b < B; ++b) {
        const T* xb = x.data() + static_cast<size_t>(b) * g.in_c * g.in_h * g.in_w;
        const T* col = xb;
        if (!direct) {
            im2col(xb, g, colbuf);
            col = colbuf;
        }
        const T* db = dout.data() + static_cast<size_t>(b) * Co * S;
        gemm(false, true, Co, P, S, T(1), db, S, col, S, T(1), dw.data(), P);
        if (dbias)
            for (int c = 0; c < Co; ++c) {
                const T* dc = db + static_cast<size_t>(c) * S;
                T acc = 0;
                for (int s = 0; s < S; ++s) acc += dc[s];
                dbias[c] += acc;
            }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2dOp : Op<T> {
    ConvGeom geom;
    bool has_bias;
    detail::ConvScratch<T> scratch;
    Conv2dOp(ConvGeom g, bool bias) : geom(g), has_bias(bias) {}
    const char* name() const override { return "conv2d"; }

    void backward(Graph<T>& g, int node, bool with_params) override {
        auto& n = g.node(node);
        const Tensor<T>& dout = g.grad(node);
        int xi = n.in[0], wi = n.in[1];
        if (g.wants(xi))
            detail::conv_backward_data(dout, g.val(wi), geom, g.grad(xi), scratch);
        if (with_params && g.wants(wi)) {
            T* dbias = has_bias && g.wants(n.in[2]) ? g.grad(n.in[2]).data() : nullptr;
            detail::conv_backward_weight(dout, g.val(xi), geom, g.grad(wi), dbias, scratch);
        }
    }

    void jvp(Graph<T>& g, int node) override {
        auto& n = g.node(node);
        int xi = n.in[0], wi = n.in[1];
        Tensor<T>& t = g.tan(node);
        bool acc = false;
        if (g.on_tangent_path(xi)) {
            detail::conv_forward(g.tan(xi), g.val(wi), static_cast<const T*>(nullptr), geom, t,
                                 scratch, acc);
            acc = true;
        }
        if (g.on_tangent_path(wi))
            detail::conv_forward(g.val(xi), g.tan(wi), static_cast<const T*>(nullptr), geom, t,
                                 scratch, acc);
        // bias tangent would add a constant per channel; parameters carry no
        // tangent in the R1 sweep, so nothing to do here.
    }

    void backward_tangent(Graph<T>& g, int node) override {
        auto& n = g.node(node);
        int xi = n.in[0], wi = n.in[1];
        const bool src = g.gtan_nonzero(node);
        if (src && g.wants(xi)) {
            detail::conv_backward_data(g.gtan(node), g.val(wi), geom, g.gtan(xi), scratch);
            g.mark_gtan(xi);
        }
        if (g.wants(wi)) {
            // d/d(eps) dW = corr(x_tan, g_out) + corr(x, gt_out)
            if (g.on_tangent_path(xi)) {
                detail::conv_backward_weight(g.grad(node), g.tan(xi), geom, g.gtan(wi),
                                             static_cast<T*>(nullptr), scratch);
                g.mark_gtan(wi);
            }
            if (src) {
                T* dbias = has_bias && g.wants(n.in[2]) ? g.gtan(n.in[2]).data() : nullptr;
                detail::conv_backward_weight(g.gtan(node), g.val(xi), geom, g.gtan(wi), dbias,
                                             scratch);
                g.mark_gtan(wi);
                if (dbias) g.mark_gtan(n.in[2]);
            }
        }
    }
};

template <typename T>
inline Value conv2d(Graph<T>& g, Value x, Value w, Value b, int stride, int pad) {
    const Tensor<T>& xv = g.val(x);
    const Tensor<T>& wv = g.val(w);
    if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(1))
        throw domain_error("conv2d: bad shapes " + shape_str(xv.shape()) + " vs " +
                           shape_str(wv.shape()));
    ConvGeom geom{xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(2), stride, pad};
    Tensor<T> out({xv.dim(0), wv.dim(0), geom.out_h(), geom.out_w()});
    auto op = std::make_unique<Conv2dOp<T>>(geom, b.valid());
    detail::conv_forward(xv, wv, b.valid() ? g.val(b).data() : nullptr, geom, out, op->scratch,
                         false);
    std::vector<int> in{x.id, w.id};
    if (b.valid()) in.push_back(b.id);
    return g.emit(std::move(op), std::move(in), std::move(out));
}

template <typename T>
struct LinearOp : Op<T> {
    bool has_bias;
    explicit LinearOp(bool bias) : has_bias(bias) {}
    const char* name() const override { return "linear"; }

    void backward(Graph<T>& g, int node, bool with_params) override {
        auto& n = g.node(node);
        const Tensor<T>& dout = g.grad(node);
        const Tensor<T>& x = g.val(n.in[0]);
        const Tensor<T>& w = g.val(n.in[1]);
        const int B = x.dim(0), I = x.dim(1), O = w.dim(0);
        if (g.wants(n.in[0]))
            gemm(false, false, B, I, O, T(1), dout.data(), O, w.data(), I, T(1),
                 g.grad(n.in[0]).data(), I);
        if (with_params && g.wants(n.in[1])) {
            gemm(true, false, O, I, B, T(1), dout.data(), O, x.data(), I, T(1),
                 g.grad(n.in[1]).data(), I);
            if (has_bias && g.wants(n.in[2])) {
                T* db = g.grad(n.in[2]).data();
                for (int b = 0; b < B; ++b)
                    for (int o = 0; o < O; ++o) db[o] += dout[static_cast<size_t>(b) * O + o];
            }
        }
    }

    void jvp(Graph<T>& g, int node) override {
        auto& n = g.node(node);
        const Tensor<T>& x = g.val(n.in[0]);
        const Tensor<T>& w = g.val(n.in[1]);
        const int B = x.dim(0), I = x.dim(1), O = w.dim(0);
        Tensor<T>& t = g.tan(node);
        if (g.on_tangent_path(n.in[0]))
            gemm(false, true, B, O, I, T(1), g.tan(n.in[0]).data(), I, w.data(), I, T(1), t.data(),
                 O);
        if (g.on_tangent_path(n.in[1]))
            gemm(false, true, B, O, I, T(1), x.data(), I, g.tan(n.in[1]).data(), I, T(1), t.data(),
                 O);
    }

    void backward_tangent(Graph<T>& g, int node) override {
        auto& n = g.node(node);
        const bool src = g.gtan_nonzero(node);
        const Tensor<T>& x = g.val(n.in[0]);
        const Tensor<T>& w = g.val(n.in[1]);
        const int B = x.dim(0), I = x.dim(1), O = w.dim(0);
        if (src && g.wants(n.in[0])) {
            gemm(false, false, B, I, O, T(1), g.gtan(node).data(), O, w.data(), I, T(1),
                 g.gtan(n.in[0]).data(), I);
            g.mark_gtan(n.in[0]);
        }
        if (g.wants(n.in[1])) {
            if (g.on_tangent_path(n.in[0])) {
                gemm(true, false, O, I, B, T(1), g.grad(node).data(), O, g.tan(n.in[0]).data(), I,
                     T(1), g.gtan(n.in[1]).data(), I);
                g.mark_gtan(n.in[1]);
            }
            if (src) {
                const Tensor<T>& gt_out = g.gtan(node);
                gemm(true, false, O, I, B, T(1), gt_out.data(), O, x.data(), I, T(1),
                     g.gtan(n.in[1]).data(), I);
                g.mark_gtan(n.in[1]);
                if (has_bias && g.wants(n.in[2])) {
                    T* db = g.gtan(n.in[2]).data();
                    for (int b = 0; b < B; ++b)
                        for (int o = 0; o < O; ++o) db[o] += gt_out[static_cast<size_t>(b) * O + o];
                    g.mark_gtan(n.in[2]);
                }
            }
        }
    }
};

/// x [B,I] * w [O,I]^T + b -> [B,O]
template <typename T>
inline Value linear(Graph<T>& g, Value x, Value w, Value b) {
    const Tensor<T>& xv = g.val(x);
    const Tensor<T>& wv = g.val(w);
    if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1))
        throw domain_error("linear: bad shapes");
    const int B = xv.dim(0), I = xv.dim(1), O = wv.dim(0);
    Tensor<T> out({B, O});
    if (b.valid()) {
        const T* bp = g.val(b).data();
        for (int i = 0; i < B; ++i)
            for (int o = 0; o < O; ++o) out[static_cast<size_t>(i) * O + o] = bp[o];
        gemm(false, true, B, O, I, T(1), xv.data(), I, wv.data(), I, T(1), out.data(), O);
    } else {
        gemm(false, true, B, O, I, T(1), xv.data(), I, wv.data(), I, T(0), out.data(), O);
    }
    std::vector<int> in{x.id, w.id};
    if (b.valid()) in.push_back(b.id);
    return g.emit(std::make_unique<LinearOp<T>>(b.valid()), std::move(in), std::move(out));
}

template <typename T>
struct LeakyReluOp : Op<T> {
    T slope;
    explicit LeakyReluOp(T s) : slope(s) {}
    const char* name() const override { return "leaky_relu"; }

    void apply_mask(Graph<T>& g, int node, const Tensor<T>& src, Tensor<T>& dst) {
        const Tensor<T>& x = g.val(g.node(node).in[0]);
        for (size_t i = 0; i < x.size(); ++i) dst[i] += (x[i] > T(0) ? T(1) : slope) * src[i];
    }
    void backward(Graph<T>& g, int node, bool) override {
        if (g.wants(g.node(node).in[0])) apply_mask(g, node, g.grad(node), g.grad(g.node(node).in[0]));
    }
    void jvp(Graph<T>& g, int node) override {
        apply_mask(g, node, g.tan(g.node(node).in[0]), g.tan(node));
    }
    void backward_tangent(Graph<T>& g, int node) override {
        const int xi = g.node(node).in[0];
        if (g.gtan_nonzero(node) && g.wants(xi)) {
            apply_mask(g, node, g.gtan(node), g.gtan(xi));
            g.mark_gtan(xi);
        }
    }
};

template <typename T>
inline Value leaky_relu(Graph<T>& g, Value x, T slope) {
    const Tensor<T>& xv = g.val(x);
    Tensor<T> out(xv.shape());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : slope * xv[i];
    return g.emit(std::make_unique<LeakyReluOp<T>>(slope), {x.id}, std::move(out));
}

template <typename T>
inline Value relu(Graph<T>& g, Value x) {
    return leaky_relu(g, x, T(0));
}

template <typename T>
struct TanhOp : Op<T> {
    const char* name() const override { return "tanh"; }
    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        if (!g.wants(n.in[0])) return;
        const Tensor<T>& y = n.val;
        const Tensor<T>& dy = g.grad(node);
        Tensor<T>& dx = g.grad(n.in[0]);
        for (size_t i = 0; i < y.size(); ++i) dx[i] += (T(1) - y[i] * y[i]) * dy[i];
    }
};

template <typename T>
inline Value tanh_act(Graph<T>& g, Value x) {
    const Tensor<T>& xv = g.val(x);
    Tensor<T> out(xv.shape());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = std::tanh(xv[i]);
    return g.emit(std::make_unique<TanhOp<T>>(), {x.id}, std::move(out));
}

template <typename T>
struct SigmoidOp : Op<T> {
    const char* name() const override { return "sigmoid"; }
    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        if (!g.wants(n.in[0])) return;
        const Tensor<T>& y = n.val;
        const Tensor<T>& dy = g.grad(node);
        Tensor<T>& dx = g.grad(n.in[0]);
        for (size_t i = 0; i < y.size(); ++i) dx[i] += y[i] * (T(1) - y[i]) * dy[i];
    }
};

template <typename T>
inline Value sigmoid(Graph<T>& g, Value x) {
    const Tensor<T>& xv = g.val(x);
    Tensor<T> out(xv.shape());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-xv[i]));
    return g.emit(std::make_unique<SigmoidOp<T>>(), {x.id}, std::move(out));
}

template <typename T>
struct AbsOp : Op<T> {
    const char* name() const override { return "abs"; }
    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        if (!g.wants(n.in[0])) return;
        const Tensor<T>& x = g.val(n.in[0]);
        const Tensor<T>& dy = g.grad(node);
        Tensor<T>& dx = g.grad(n.in[0]);
        for (size_t i = 0; i < x.size(); ++i)
            dx[i] += (x[i] > T(0) ? dy[i] : (x[i] < T(0) ? -dy[i] : T(0)));
    }
};

template <typename T>
inline Value abs_val(Graph<T>& g, Value x) {
    const Tensor<T>& xv = g.val(x);
    Tensor<T> out(xv.shape());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = std::abs(xv[i]);
    return g.emit(std::make_unique<AbsOp<T>>(), {x.id}, std::move(out));
}

/// y = a + alpha * b (same shape)
template <typename T>
struct AddOp : Op<T> {
    T alpha;
    explicit AddOp(T a) : alpha(a) {}
    const char* name() const override { return "add"; }
    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        if (g.wants(n.in[0])) axpy(T(1), g.grad(node), g.grad(n.in[0]));
        if (g.wants(n.in[1])) axpy(alpha, g.grad(node), g.grad(n.in[1]));
    }
    void jvp(Graph<T>& g, int node) override {
        auto& n = g.node(node);
        if (g.on_tangent_path(n.in[0])) axpy(T(1), g.tan(n.in[0]), g.tan(node));
        if (g.on_tangent_path(n.in[1])) axpy(alpha, g.tan(n.in[1]), g.tan(node));
    }
    void backward_tangent(Graph<T>& g, int node) override {
        auto& n = g.node(node);
        if (!g.gtan_nonzero(node)) return;
        if (g.wants(n.in[0])) {
            axpy(T(1), g.gtan(node), g.gtan(n.in[0]));
            g.mark_gtan(n.in[0]);
        }
        if (g.wants(n.in[1])) {
            axpy(alpha, g.gtan(node), g.gtan(n.in[1]));
            g.mark_gtan(n.in[1]);
        }
    }
};

template <typename T>
inline Value add(Graph<T>& g, Value a, Value b, T alpha = T(1)) {
    const Tensor<T>& av = g.val(a);
    const Tensor<T>& bv = g.val(b);
    if (!av.same_shape(bv)) throw domain_error("add: shape mismatch");
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + alpha * bv[i];
    return g.emit(std::make_unique<AddOp<T>>(alpha), {a.id, b.id}, std::move(out));
}

/// Elementwise (Hadamard) product.
template <typename T>
struct MulOp : Op<T> {
    const char* name() const override { return "mul"; }
    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        const Tensor<T>& dy = g.grad(node);
        if (g.wants(n.in[0])) {
            const Tensor<T>& b = g.val(n.in[1]);
            Tensor<T>& da = g.grad(n.in[0]);
            for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * b[i];
        }
        if (g.wants(n.in[1])) {
            const Tensor<T>& a = g.val(n.in[0]);
            Tensor<T>& db = g.grad(n.in[1]);
            for (size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * a[i];
        }
    }
    void jvp(Graph<T>& g, int node) override {
        auto& n = g.node(node);
        Tensor<T>& t = g.tan(node);
        if (g.on_tangent_path(n.in[0])) {
            const Tensor<T>& ta = g.tan(n.in[0]);
            const Tensor<T>& b = g.val(n.in[1]);
            for (size_t i = 0; i < t.size(); ++i) t[i] += ta[i] * b[i];
        }
        if (g.on_tangent_path(n.in[1])) {
            const Tensor<T>& tb = g.tan(n.in[1]);
            const Tensor<T>& a = g.val(n.in[0]);
            for (size_t i = 0; i < t.size(); ++i) t[i] += tb[i] * a[i];
        }
    }
    void backward_tangent(Graph<T>& g, int node) override {
        auto& n = g.node(node);
        const bool src = g.gtan_nonzero(node);
        auto accum = [&](int dst, int other, bool other_tan) {
            if (!g.wants(dst)) return;
            Tensor<T>& d = g.gtan(dst);
            bool any = false;
            if (src) {
                const Tensor<T>& gt = g.gtan(node);
                const Tensor<T>& ov = g.val(other);
                for (size_t i = 0; i < d.size(); ++i) d[i] += gt[i] * ov[i];
                any = true;
            }
            if (other_tan) {
                const Tensor<T>& gr = g.grad(node);
                const Tensor<T>& ot = g.tan(other);
                for (size_t i = 0; i < d.size(); ++i) d[i] += gr[i] * ot[i];
                any = true;
            }
            if (any) g.mark_gtan(dst);
        };
        accum(n.in[0], n.in[1], g.on_tangent_path(n.in[1]));
        accum(n.in[1], n.in[0], g.on_tangent_path(n.in[0]));
    }
};

template <typename T>
inline Value mul(Graph<T>& g, Value a, Value b) {
    const Tensor<T>& av = g.val(a);
    const Tensor<T>& bv = g.val(b);
    if (!av.same_shape(bv)) throw domain_error("mul: shape mismatch");
    Tensor<T> out(av.shape());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    return g.emit(std::make_unique<MulOp<T>>(), {a.id, b.id}, std::move(out));
}

/// y = mul * x + shift (elementwise)
template <typename T>
struct AffineScalarOp : Op<T> {
    T mul;
    explicit AffineScalarOp(T m) : mul(m) {}
    const char* name() const override { return "affine_scalar"; }
    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        if (g.wants(n.in[0])) axpy(mul, g.grad(node), g.grad(n.in[0]));
    }
    void jvp(Graph<T>& g, int node) override {
        axpy(mul, g.tan(g.node(node).in[0]), g.tan(node));
    }
    void backward_tangent(Graph<T>& g, int node) override {
        auto& n = g.node(node);
        if (g.gtan_nonzero(node) && g.wants(n.in[0])) {
            axpy(mul, g.gtan(node), g.gtan(n.in[0]));
            g.mark_gtan(n.in[0]);
        }
    }
};

template <typename T>
inline Value affine_scalar(Graph<T>& g, Value x, T mul, T shift) {
    const Tensor<T>& xv = g.val(x);
    Tensor<T> out(xv.shape());
    for (size_t i = 0; i < xv.size(); ++i) out[i] = mul * xv[i] + shift;
    return g.emit(std::make_unique<AffineScalarOp<T>>(mul), {x.id}, std::move(out));
}

template <typename T>
struct ReshapeOp : Op<T> {
    const char* name() const override { return "reshape"; }
    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        if (!g.wants(n.in[0])) return;
        Tensor<T>& dx = g.grad(n.in[0]);
        const Tensor<T>& dy = g.grad(node);
        for (size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    }
    void jvp(Graph<T>& g, int node) override {
        const Tensor<T>& tin = g.tan(g.node(node).in[0]);
        Tensor<T>& tout = g.tan(node);
        for (size_t i = 0; i < tin.size(); ++i) tout[i] += tin[i];
    }
    void backward_tangent(Graph<T>& g, int node) override {
        const int xi = g.node(node).in[0];
        if (g.gtan_nonzero(node) && g.wants(xi)) {
            const Tensor<T>& gt = g.gtan(node);
            Tensor<T>& gx = g.gtan(xi);
            for (size_t i = 0; i < gt.size(); ++i) gx[i] += gt[i];
            g.mark_gtan(xi);
        }
    }
};

template <typename T>
inline Value reshape(Graph<T>& g, Value x, std::vector<int> shape) {
    Tensor<T> out = g.val(x).clone().reshaped(std::move(shape));
    return g.emit(std::make_unique<ReshapeOp<T>>(), {x.id}, std::move(out));
}

/// Nearest-neighbor 2x upsample.
template <typename T>
struct Upsample2Op : Op<T> {
    const char* name() const override { return "upsample_nearest2"; }
    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        if (!g.wants(n.in[0])) return;
        const Tensor<T>& dy = g.grad(node);
        Tensor<T>& dx = g.grad(n.in[0]);
        const int B = dx.dim(0), C = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j)
                        dx.at(b, c, i, j) += dy.at(b, c, 2 * i, 2 * j) + dy.at(b, c, 2 * i, 2 * j + 1) +
                                             dy.at(b, c, 2 * i + 1, 2 * j) +
                                             dy.at(b, c, 2 * i + 1, 2 * j + 1);
    }
};

template <typename T>
inline Value upsample_nearest2(Graph<T>& g, Value x) {
    const Tensor<T>& xv = g.val(x);
    const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor<T> out({B, C, 2 * H, 2 * W});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    T v = xv.at(b, c, i, j);
                    out.at(b, c, 2 * i, 2 * j) = v;
                    out.at(b, c, 2 * i, 2 * j + 1) = v;
                    out.at(b, c, 2 * i + 1, 2 * j) = v;
                    out.at(b, c, 2 * i + 1, 2 * j + 1) = v;
                }
    return g.emit(std::make_unique<Upsample2Op<T>>(), {x.id}, std::move(out));
}

/// 2x2 average pooling, stride 2.
template <typename T>
struct AvgPool2Op : Op<T> {
    const char* name() const override { return "avg_pool2"; }

    static void spread(const Tensor<T>& dy, Tensor<T>& dx) {
        const int B = dy.dim(0), C = dy.dim(1), H = dy.dim(2), W = dy.dim(3);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        T v = dy.at(b, c, i, j) * T(0.25);
                        dx.at(b, c, 2 * i, 2 * j) += v;
                        dx.at(b, c, 2 * i, 2 * j + 1) += v;
                        dx.at(b, c, 2 * i + 1, 2 * j) += v;
                        dx.at(b, c, 2 * i + 1, 2 * j + 1) += v;
                    }
    }
    static void pool(const Tensor<T>& x, Tensor<T>& y, bool accum) {
        const int B = y.dim(0), C = y.dim(1), H = y.dim(2), W = y.dim(3);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        T v = T(0.25) * (x.at(b, c, 2 * i, 2 * j) + x.at(b, c, 2 * i, 2 * j + 1) +
                                         x.at(b, c, 2 * i + 1, 2 * j) + x.at(b, c, 2 * i + 1, 2 * j + 1));
                        if (accum)
                            y.at(b, c, i, j) += v;
                        else
                            y.at(b, c, i, j) = v;
                    }
    }

    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        if (g.wants(n.in[0])) spread(g.grad(node), g.grad(n.in[0]));
    }
    void jvp(Graph<T>& g, int node) override {
        pool(g.tan(g.node(node).in[0]), g.tan(node), true);
    }
    void backward_tangent(Graph<T>& g, int node) override {
        auto& n = g.node(node);
        if (g.gtan_nonzero(node) && g.wants(n.in[0])) {
            spread(g.gtan(node), g.gtan(n.in[0]));
            g.mark_gtan(n.in[0]);
        }
    }
};

template <typename T>
inline Value avg_pool2(Graph<T>& g, Value x) {
    const Tensor<T>& xv = g.val(x);
    if (xv.dim(2) % 2 || xv.dim(3) % 2) throw domain_error("avg_pool2: odd spatial size");
    Tensor<T> out({xv.dim(0), xv.dim(1), xv.dim(2) / 2, xv.dim(3) / 2});
    AvgPool2Op<T>::pool(xv, out, false);
    return g.emit(std::make_unique<AvgPool2Op<T>>(), {x.id}, std::move(out));
}

template <typename T>
struct SumAllOp : Op<T> {
    T weight;  // 1 for sum, 1/N for mean
    explicit SumAllOp(T w) : weight(w) {}
    const char* name() const override { return "sum_all"; }
    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        if (!g.wants(n.in[0])) return;
        const T s = g.grad(node)[0] * weight;
        Tensor<T>& dx = g.grad(n.in[0]);
        for (size_t i = 0; i < dx.size(); ++i) dx[i] += s;
    }
    void jvp(Graph<T>& g, int node) override {
        const Tensor<T>& tx = g.tan(g.node(node).in[0]);
        T s = 0;
        for (size_t i = 0; i < tx.size(); ++i) s += tx[i];
        g.tan(node)[0] += weight * s;
    }
    void backward_tangent(Graph<T>& g, int node) override {
        auto& n = g.node(node);
        if (!g.gtan_nonzero(node) || !g.wants(n.in[0])) return;
        const T s = g.gtan(node)[0] * weight;
        Tensor<T>& dx = g.gtan(n.in[0]);
        for (size_t i = 0; i < dx.size(); ++i) dx[i] += s;
        g.mark_gtan(n.in[0]);
    }
};

template <typename T>
inline Value sum_all(Graph<T>& g, Value x) {
    const Tensor<T>& xv = g.val(x);
    T s = 0;
    for (size_t i = 0; i < xv.size(); ++i) s += xv[i];
    return g.emit(std::make_unique<SumAllOp<T>>(T(1)), {x.id}, Tensor<T>::scalar(s));
}

template <typename T>
inline Value mean_all(Graph<T>& g, Value x) {
    const Tensor<T>& xv = g.val(x);
    T s = 0;
    for (size_t i = 0; i < xv.size(); ++i) s += xv[i];
    const T w = T(1) / static_cast<T>(xv.size());
    return g.emit(std::make_unique<SumAllOp<T>>(w), {x.id}, Tensor<T>::scalar(s * w));
}

/// [B,C,H,W] -> [B,C], sum over spatial positions.
template <typename T>
struct SumSpatialOp : Op<T> {
    const char* name() const override { return "sum_spatial"; }
    static void spread(const Tensor<T>& dy, Tensor<T>& dx) {
        const int B = dx.dim(0), C = dx.dim(1), S = dx.dim(2) * dx.dim(3);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                const T v = dy[static_cast<size_t>(b) * C + c];
                T* p = dx.data() + (static_cast<size_t>(b) * C + c) * S;
                for (int s = 0; s < S; ++s) p[s] += v;
            }
    }
    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        if (g.wants(n.in[0])) spread(g.grad(node), g.grad(n.in[0]));
    }
    void jvp(Graph<T>& g, int node) override {
        const Tensor<T>& tx = g.tan(g.node(node).in[0]);
        Tensor<T>& t = g.tan(node);
        const int B = tx.dim(0), C = tx.dim(1), S = tx.dim(2) * tx.dim(3);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                const T* p = tx.data() + (static_cast<size_t>(b) * C + c) * S;
                T acc = 0;
                for (int s = 0; s < S; ++s) acc += p[s];
                t[static_cast<size_t>(b) * C + c] += acc;
            }
    }
    void backward_tangent(Graph<T>& g, int node) override {
        auto& n = g.node(node);
        if (g.gtan_nonzero(node) && g.wants(n.in[0])) {
            spread(g.gtan(node), g.gtan(n.in[0]));
            g.mark_gtan(n.in[0]);
        }
    }
};

template <typename T>
inline Value sum_spatial(Graph<T>& g, Value x) {
    const Tensor<T>& xv = g.val(x);
    Tensor<T> out({xv.dim(0), xv.dim(1)});
    const int B = xv.dim(0), C = xv.dim(1), S = xv.dim(2) * xv.dim(3);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const T* p = xv.data() + (static_cast<size_t>(b) * C + c) * S;
            T acc = 0;
            for (int s = 0; s < S; ++s) acc += p[s];
            out[static_cast<size_t>(b) * C + c] = acc;
        }
    return g.emit(std::make_unique<SumSpatialOp<T>>(), {x.id}, std::move(out));
}

/// y[b,c,:,:] = x[b,c,:,:] * gate[b,c]
template <typename T>
struct ChannelGateOp : Op<T> {
    const char* name() const override { return "channel_gate"; }
    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        const Tensor<T>& dy = g.grad(node);
        const Tensor<T>& x = g.val(n.in[0]);
        const Tensor<T>& gate = g.val(n.in[1]);
        const int B = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
        if (g.wants(n.in[0])) {
            Tensor<T>& dx = g.grad(n.in[0]);
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const T gv = gate[static_cast<size_t>(b) * C + c];
                    const size_t off = (static_cast<size_t>(b) * C + c) * S;
                    for (int s = 0; s < S; ++s) dx[off + s] += gv * dy[off + s];
                }
        }
        if (g.wants(n.in[1])) {
            Tensor<T>& dg = g.grad(n.in[1]);
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const size_t off = (static_cast<size_t>(b) * C + c) * S;
                    T acc = 0;
                    for (int s = 0; s < S; ++s) acc += x[off + s] * dy[off + s];
                    dg[static_cast<size_t>(b) * C + c] += acc;
                }
        }
    }
};

template <typename T>
inline Value channel_gate(Graph<T>& g, Value x, Value gate) {
    const Tensor<T>& xv = g.val(x);
    const Tensor<T>& gv = g.val(gate);
    if (gv.rank() != 2 || gv.dim(0) != xv.dim(0) || gv.dim(1) != xv.dim(1))
        throw domain_error("channel_gate: gate must be [B,C]");
    Tensor<T> out(xv.shape());
    const int B = xv.dim(0), C = xv.dim(1), S = xv.dim(2) * xv.dim(3);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const T gg = gv[static_cast<size_t>(b) * C + c];
            const size_t off = (static_cast<size_t>(b) * C + c) * S;
            for (int s = 0; s < S; ++s) out[off + s] = gg * xv[off + s];
        }
    return g.emit(std::make_unique<ChannelGateOp<T>>(), {x.id, gate.id}, std::move(out));
}

// ---------------------------------------------------------------------------
// normalization & attention
// ---------------------------------------------------------------------------

/// Adaptive instance norm: per (sample, channel) standardize over H*W, then
/// y = s[b,c] * xhat + t[b,c]. Style inputs are [B,C].
template <typename T>
struct AdainOp : Op<T> {
    T eps;
    std::vector<T> mean, istd;  // cached per (b,c)
    explicit AdainOp(T e) : eps(e) {}
    const char* name() const override { return "adain"; }

    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        const Tensor<T>& dy = g.grad(node);
        const Tensor<T>& x = g.val(n.in[0]);
        const Tensor<T>& s = g.val(n.in[1]);
        const int B = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
        const bool wx = g.wants(n.in[0]), ws = g.wants(n.in[1]), wt = g.wants(n.in[2]);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                const size_t bc = static_cast<size_t>(b) * C + c;
                const size_t off = bc * S;
                const T mu = mean[bc], is = istd[bc], sv = s[bc];
                T sum_dy = 0, sum_dy_xh = 0, sum_dy_x = 0;
                for (int k = 0; k < S; ++k) {
                    sum_dy += dy[off + k];
                    sum_dy_x += dy[off + k] * x[off + k];
                }
                sum_dy_xh = (sum_dy_x - mu * sum_dy) * is;
                if (ws) g.grad(n.in[1])[bc] += sum_dy_xh;
                if (wt) g.grad(n.in[2])[bc] += sum_dy;
                if (wx) {
                    Tensor<T>& dx = g.grad(n.in[0]);
                    const T m1 = sum_dy / static_cast<T>(S);
                    const T m2 = sum_dy_xh / static_cast<T>(S);
                    for (int k = 0; k < S; ++k) {
                        const T xh = (x[off + k] - mu) * is;
                        dx[off + k] += sv * is * (dy[off + k] - m1 - xh * m2);
                    }
                }
            }
    }
};

/// s and t must be [B,C] matching x's batch and channel dims.
template <typename T>
inline Value adain(Graph<T>& g, Value x, Value s, Value t, T eps = T(1e-5)) {
    const Tensor<T>& xv = g.val(x);
    const Tensor<T>& sv = g.val(s);
    const Tensor<T>& tv = g.val(t);
    const int B = xv.dim(0), C = xv.dim(1), S = xv.dim(2) * xv.dim(3);
    if (sv.rank() != 2 || sv.dim(0) != B || sv.dim(1) != C || !sv.same_shape(tv))
        throw domain_error("adain: style shapes must be [B,C]");
    auto op = std::make_unique<AdainOp<T>>(eps);
    op->mean.resize(static_cast<size_t>(B) * C);
    op->istd.resize(static_cast<size_t>(B) * C);
    Tensor<T> out(xv.shape());
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const size_t bc = static_cast<size_t>(b) * C + c;
            const size_t off = bc * S;
            T mu = 0;
            for (int k = 0; k < S; ++k) mu += xv[off + k];
            mu /= static_cast<T>(S);
            T var = 0;
            for (int k = 0; k < S; ++k) {
                const T d = xv[off + k] - mu;
                var += d * d;
            }
            var /= static_cast<T>(S);
            const T is = T(1) / std::sqrt(var + eps);
            op->mean[bc] = mu;
            op->istd[bc] = is;
            for (int k = 0; k < S; ++k) out[off + k] = sv[bc] * (xv[off + k] - mu) * is + tv[bc];
        }
    return g.emit(std::move(op), {x.id, s.id, t.id}, std::move(out));
}

/// Layer norm over the feature dim of [B,F] with learned gamma/beta [F].
template <typename T>
struct LayerNormOp : Op<T> {
    T eps;
    std::vector<T> mean, istd;  // per sample
    explicit LayerNormOp(T e) : eps(e) {}
    const char* name() const override { return "layer_norm"; }

    void backward(Graph<T>& g, int node, bool with_params) override {
        auto& n = g.node(node);
        const Tensor<T>& dy = g.grad(node);
        const Tensor<T>& x = g.val(n.in[0]);
        const Tensor<T>& gamma = g.val(n.in[1]);
        const int B = x.dim(0), F = x.dim(1);
        const bool wx = g.wants(n.in[0]);
        const bool wg = with_params && g.wants(n.in[1]);
        const bool wb = with_params && g.wants(n.in[2]);
        for (int b = 0; b < B; ++b) {
            const size_t off = static_cast<size_t>(b) * F;
            const T mu = mean[b], is = istd[b];
            T sum_dg = 0, sum_dg_xh = 0;
            for (int f = 0; f < F; ++f) {
                const T xh = (x[off + f] - mu) * is;
                const T dgf = dy[off + f] * gamma[f];
                sum_dg += dgf;
                sum_dg_xh += dgf * xh;
                if (wg) g.grad(n.in[1])[f] += dy[off + f] * xh;
                if (wb) g.grad(n.in[2])[f] += dy[off + f];
            }
            if (wx) {
                Tensor<T>& dx = g.grad(n.in[0]);
                const T m1 = sum_dg / static_cast<T>(F);
                const T m2 = sum_dg_xh / static_cast<T>(F);
                for (int f = 0; f < F; ++f) {
                    const T xh = (x[off + f] - mu) * is;
                    dx[off + f] += is * (dy[off + f] * gamma[f] - m1 - xh * m2);
                }
            }
        }
    }
};

template <typename T>
inline Value layer_norm(Graph<T>& g, Value x, Value gamma, Value beta, T eps = T(1e-5)) {
    const Tensor<T>& xv = g.val(x);
    const Tensor<T>& gv = g.val(gamma);
    const Tensor<T>& bv = g.val(beta);
    if (xv.rank() != 2 || gv.size() != static_cast<size_t>(xv.dim(1)) || bv.size() != gv.size())
        throw domain_error("layer_norm: x must be [B,F] with gamma/beta [F]");
    const int B = xv.dim(0), F = xv.dim(1);
    auto op = std::make_unique<LayerNormOp<T>>(eps);
    op->mean.resize(B);
    op->istd.resize(B);
    Tensor<T> out(xv.shape());
    for (int b = 0; b < B; ++b) {
        const size_t off = static_cast<size_t>(b) * F;
        T mu = 0;
        for (int f = 0; f < F; ++f) mu += xv[off + f];
        mu /= static_cast<T>(F);
        T var = 0;
        for (int f = 0; f < F; ++f) {
            const T d = xv[off + f] - mu;
            var += d * d;
        }
        var /= static_cast<T>(F);
        const T is = T(1) / std::sqrt(var + eps);
        op->mean[b] = mu;
        op->istd[b] = is;
        for (int f = 0; f < F; ++f) out[off + f] = gv[f] * (xv[off + f] - mu) * is + bv[f];
    }
    return g.emit(std::move(op), {x.id, gamma.id, beta.id}, std::move(out));
}

/// Attention pooling: softmax the [B,1,H,W] logits over positions and take the
/// weighted sum of feat [B,C,H,W] -> ctx [B,C].
template <typename T>
struct AttnPoolOp : Op<T> {
    Tensor<T> weights;  // [B, S] cached softmax
    const char* name() const override { return "attn_pool"; }

    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        const Tensor<T>& dctx = g.grad(node);
        const Tensor<T>& feat = g.val(n.in[0]);
        const int B = feat.dim(0), C = feat.dim(1), S = feat.dim(2) * feat.dim(3);
        if (g.wants(n.in[0])) {
            Tensor<T>& df = g.grad(n.in[0]);
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const T dv = dctx[static_cast<size_t>(b) * C + c];
                    const size_t off = (static_cast<size_t>(b) * C + c) * S;
                    const T* wb = weights.data() + static_cast<size_t>(b) * S;
                    for (int s = 0; s < S; ++s) df[off + s] += wb[s] * dv;
                }
        }
        if (g.wants(n.in[1])) {
            Tensor<T>& dl = g.grad(n.in[1]);
            std::vector<T> dw(S);
            for (int b = 0; b < B; ++b) {
                const T* wb = weights.data() + static_cast<size_t>(b) * S;
                for (int s = 0; s < S; ++s) {
                    T acc = 0;
                    for (int c = 0; c < C; ++c)
                        acc += dctx[static_cast<size_t>(b) * C + c] *
                               feat[(static_cast<size_t>(b) * C + c) * S + s];
                    dw[s] = acc;
                }
                T wdot = 0;
                for (int s = 0; s < S; ++s) wdot += wb[s] * dw[s];
                T* dlb = dl.data() + static_cast<size_t>(b) * S;
                for (int s = 0; s < S; ++s) dlb[s] += wb[s] * (dw[s] - wdot);
            }
        }
    }
};

template <typename T>
inline Value attn_pool(Graph<T>& g, Value feat, Value logits) {
    const Tensor<T>& fv = g.val(feat);
    const Tensor<T>& lv = g.val(logits);
    const int B = fv.dim(0), C = fv.dim(1), S = fv.dim(2) * fv.dim(3);
    if (lv.dim(0) != B || lv.dim(1) != 1 || lv.dim(2) != fv.dim(2) || lv.dim(3) != fv.dim(3))
        throw domain_error("attn_pool: logits must be [B,1,H,W]");
    auto op = std::make_unique<AttnPoolOp<T>>();
    op->weights = Tensor<T>({B, S});
    Tensor<T> out({B, C});
    for (int b = 0; b < B; ++b) {
        const T* lb = lv.data() + static_cast<size_t>(b) * S;
        T* wb = op->weights.data() + static_cast<size_t>(b) * S;
        T m = lb[0];
        for (int s = 1; s < S; ++s) m = std::max(m, lb[s]);
        T z = 0;
        for (int s = 0; s < S; ++s) {
            wb[s] = std::exp(lb[s] - m);
            z += wb[s];
        }
        for (int s = 0; s < S; ++s) wb[s] /= z;
        for (int c = 0; c < C; ++c) {
            const T* fc = fv.data() + (static_cast<size_t>(b) * C + c) * S;
            T acc = 0;
            for (int s = 0; s < S; ++s) acc += wb[s] * fc[s];
            out[static_cast<size_t>(b) * C + c] = acc;
        }
    }
    return g.emit(std::move(op), {feat.id, logits.id}, std::move(out));
}

/// Projection-style conditioning: out[b,1,h,w] = <table[labels[b]], feat[b,:,h,w]>.
template <typename T>
struct ProjInnerOp : Op<T> {
    std::vector<int> labels;
    explicit ProjInnerOp(std::vector<int> y) : labels(std::move(y)) {}
    const char* name() const override { return "proj_inner"; }

    void backward(Graph<T>& g, int node, bool with_params) override {
        auto& n = g.node(node);
        const Tensor<T>& dout = g.grad(node);
        const Tensor<T>& feat = g.val(n.in[0]);
        const Tensor<T>& table = g.val(n.in[1]);
        const int B = feat.dim(0), C = feat.dim(1), S = feat.dim(2) * feat.dim(3);
        for (int b = 0; b < B; ++b) {
            const T* e = table.data() + static_cast<size_t>(labels[b]) * C;
            const T* db = dout.data() + static_cast<size_t>(b) * S;
            if (g.wants(n.in[0])) {
                Tensor<T>& df = g.grad(n.in[0]);
                for (int c = 0; c < C; ++c) {
                    T* dfc = df.data() + (static_cast<size_t>(b) * C + c) * S;
                    for (int s = 0; s < S; ++s) dfc[s] += e[c] * db[s];
                }
            }
            if (with_params && g.wants(n.in[1])) {
                T* de = g.grad(n.in[1]).data() + static_cast<size_t>(labels[b]) * C;
                for (int c = 0; c < C; ++c) {
                    const T* fc = feat.data() + (static_cast<size_t>(b) * C + c) * S;
                    T acc = 0;
                    for (int s = 0; s < S; ++s) acc += fc[s] * db[s];
                    de[c] += acc;
                }
            }
        }
    }

    void jvp(Graph<T>& g, int node) override {
        auto& n = g.node(node);
        if (!g.on_tangent_path(n.in[0])) return;
        const Tensor<T>& tf = g.tan(n.in[0]);
        const Tensor<T>& table = g.val(n.in[1]);
        const int B = tf.dim(0), C = tf.dim(1), S = tf.dim(2) * tf.dim(3);
        Tensor<T>& t = g.tan(node);
        for (int b = 0; b < B; ++b) {
            const T* e = table.data() + static_cast<size_t>(labels[b]) * C;
            T* tb = t.data() + static_cast<size_t>(b) * S;
            for (int c = 0; c < C; ++c) {
                const T* fc = tf.data() + (static_cast<size_t>(b) * C + c) * S;
                for (int s = 0; s < S; ++s) tb[s] += e[c] * fc[s];
            }
        }
    }

    void backward_tangent(Graph<T>& g, int node) override {
        auto& n = g.node(node);
        const bool src = g.gtan_nonzero(node);
        const Tensor<T>& g_out = g.grad(node);
        const Tensor<T>& feat = g.val(n.in[0]);
        const Tensor<T>& table = g.val(n.in[1]);
        const int B = feat.dim(0), C = feat.dim(1), S = feat.dim(2) * feat.dim(3);
        const bool tan_feat = g.on_tangent_path(n.in[0]);
        if (!src && !tan_feat) return;
        for (int b = 0; b < B; ++b) {
            const T* e = table.data() + static_cast<size_t>(labels[b]) * C;
            const T* gb = g_out.data() + static_cast<size_t>(b) * S;
            if (src && g.wants(n.in[0])) {
                const T* gtb = g.gtan(node).data() + static_cast<size_t>(b) * S;
                Tensor<T>& df = g.gtan(n.in[0]);
                for (int c = 0; c < C; ++c) {
                    T* dfc = df.data() + (static_cast<size_t>(b) * C + c) * S;
                    for (int s = 0; s < S; ++s) dfc[s] += e[c] * gtb[s];
                }
                g.mark_gtan(n.in[0]);
            }
            if (g.wants(n.in[1])) {
                T* de = g.gtan(n.in[1]).data() + static_cast<size_t>(labels[b]) * C;
                for (int c = 0; c < C; ++c) {
                    const T* fc = feat.data() + (static_cast<size_t>(b) * C + c) * S;
                    T acc = 0;
                    if (src) {
                        const T* gtb = g.gtan(node).data() + static_cast<size_t>(b) * S;
                        for (int s = 0; s < S; ++s) acc += fc[s] * gtb[s];
                    }
                    if (tan_feat) {
                        const T* tfc = g.tan(n.in[0]).data() + (static_cast<size_t>(b) * C + c) * S;
                        for (int s = 0; s < S; ++s) acc += tfc[s] * gb[s];
                    }
                    de[c] += acc;
                }
                g.mark_gtan(n.in[1]);
            }
        }
    }
};

template <typename T>
inline Value proj_inner(Graph<T>& g, Value feat, Value table, const std::vector<int>& labels) {
    const Tensor<T>& fv = g.val(feat);
    const Tensor<T>& ev = g.val(table);
    const int B = fv.dim(0), C = fv.dim(1), S = fv.dim(2) * fv.dim(3);
    if (ev.rank() != 2 || ev.dim(1) != C) throw domain_error("proj_inner: table must be [K,C]");
    if (static_cast<int>(labels.size()) != B) throw domain_error("proj_inner: labels size != batch");
    for (int y : labels)
        if (y < 0 || y >= ev.dim(0)) throw domain_error("proj_inner: label out of range");
    Tensor<T> out({B, 1, fv.dim(2), fv.dim(3)});
    for (int b = 0; b < B; ++b) {
        const T* e = ev.data() + static_cast<size_t>(labels[b]) * C;
        T* ob = out.data() + static_cast<size_t>(b) * S;
        for (int s = 0; s < S; ++s) ob[s] = 0;
        for (int c = 0; c < C; ++c) {
            const T* fc = fv.data() + (static_cast<size_t>(b) * C + c) * S;
            for (int s = 0; s < S; ++s) ob[s] += e[c] * fc[s];
        }
    }
    return g.emit(std::make_unique<ProjInnerOp<T>>(labels), {feat.id, table.id}, std::move(out));
}

/// Fixed spatial crop: y = x[:, :, r0:r0+h, c0:c0+w].
template <typename T>
struct CropOp : Op<T> {
    int r0, c0;
    CropOp(int r, int c) : r0(r), c0(c) {}
    const char* name() const override { return "crop"; }
    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        if (!g.wants(n.in[0])) return;
        const Tensor<T>& dy = g.grad(node);
        Tensor<T>& dx = g.grad(n.in[0]);
        const int B = dy.dim(0), C = dy.dim(1), H = dy.dim(2), W = dy.dim(3);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j)
                        dx.at(b, c, r0 + i, c0 + j) += dy.at(b, c, i, j);
    }
};

template <typename T>
inline Value crop(Graph<T>& g, Value x, int r0, int c0, int h, int w) {
    const Tensor<T>& xv = g.val(x);
    if (r0 < 0 || c0 < 0 || r0 + h > xv.dim(2) || c0 + w > xv.dim(3))
        throw domain_error("crop: window out of bounds");
    Tensor<T> out({xv.dim(0), xv.dim(1), h, w});
    for (int b = 0; b < xv.dim(0); ++b)
        for (int c = 0; c < xv.dim(1); ++c)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) out.at(b, c, i, j) = xv.at(b, c, r0 + i, c0 + j);
    return g.emit(std::make_unique<CropOp<T>>(r0, c0), {x.id}, std::move(out));
}

/// Spectral weight scaling y = w / sigma with sigma = u^T W v computed from the
/// current power-iteration vectors (held as constants). The division is fully
/// differentiated through sigma.
template <typename T>
struct SpectralScaleOp : Op<T> {
    std::vector<T> u, v;
    T sigma;
    SpectralScaleOp(std::vector<T> uu, std::vector<T> vv, T s)
        : u(std::move(uu)), v(std::move(vv)), sigma(s) {}
    const char* name() const override { return "spectral_scale"; }

    void scale_back(Graph<T>& g, int node, const Tensor<T>& dy, Tensor<T>& dw) {
        const Tensor<T>& w = g.val(g.node(node).in[0]);
        const int R = static_cast<int>(u.size()), C = static_cast<int>(v.size());
        T dot = 0;
        for (size_t i = 0; i < w.size(); ++i) dot += dy[i] * w[i];
        const T k = dot / (sigma * sigma);
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c)
                dw[static_cast<size_t>(r) * C + c] +=
                    dy[static_cast<size_t>(r) * C + c] / sigma - k * u[r] * v[c];
    }
    void backward(Graph<T>& g, int node, bool with_params) override {
        auto& n = g.node(node);
        if (with_params && g.wants(n.in[0])) scale_back(g, node, g.grad(node), g.grad(n.in[0]));
    }
    void jvp(Graph<T>&, int) override {
        // weights never carry a tangent in the R1 sweep
    }
    void backward_tangent(Graph<T>& g, int node) override {
        auto& n = g.node(node);
        if (g.gtan_nonzero(node) && g.wants(n.in[0])) {
            scale_back(g, node, g.gtan(node), g.gtan(n.in[0]));
            g.mark_gtan(n.in[0]);
        }
    }
};

/// u/v are the current left/right singular vector estimates of w viewed as
/// a [dim0, rest] matrix. A near-zero sigma passes w through unscaled.
template <typename T>
inline Value spectral_scale(Graph<T>& g, Value w, const std::vector<T>& u, const std::vector<T>& v) {
    const Tensor<T>& wv = g.val(w);
    const int R = wv.dim(0), C = static_cast<int>(wv.size()) / wv.dim(0);
    if (static_cast<int>(u.size()) != R || static_cast<int>(v.size()) != C)
        throw domain_error("spectral_scale: u/v sizes disagree with weight");
    T sigma = 0;
    for (int r = 0; r < R; ++r) {
        T acc = 0;
        for (int c = 0; c < C; ++c) acc += wv[static_cast<size_t>(r) * C + c] * v[c];
        sigma += u[r] * acc;
    }
    if (std::abs(sigma) < T(1e-12)) {
        // degenerate (e.g. zero weight): pass through untouched
        return g.emit(std::make_unique<AffineScalarOp<T>>(T(1)), {w.id}, wv.clone());
    }
    Tensor<T> out(wv.shape());
    for (size_t i = 0; i < wv.size(); ++i) out[i] = wv[i] / sigma;
    return g.emit(std::make_unique<SpectralScaleOp<T>>(u, v, sigma), {w.id}, std::move(out));
}

/// Mean softmax cross-entropy over rows of logits [B,K].
template <typename T>
struct SoftmaxCeOp : Op<T> {
    std::vector<int> labels;
    Tensor<T> probs;
    explicit SoftmaxCeOp(std::vector<int> y) : labels(std::move(y)) {}
    const char* name() const override { return "softmax_ce"; }
    void backward(Graph<T>& g, int node, bool) override {
        auto& n = g.node(node);
        if (!g.wants(n.in[0])) return;
        const T seed = g.grad(node)[0];
        Tensor<T>& dl = g.grad(n.in[0]);
        const int B = probs.dim(0), K = probs.dim(1);
        const T w = seed / static_cast<T>(B);
        for (int b = 0; b < B; ++b)
            for (int k = 0; k < K; ++k)
                dl[static_cast<size_t>(b) * K + k] +=
                    w * (probs[static_cast<size_t>(b) * K + k] - (k == labels[b] ? T(1) : T(0)));
    }
};

template <typename T>
inline Value softmax_cross_entropy(Graph<T>& g, Value logits, const std::vector<int>& labels) {
    const Tensor<T>& lv = g.val(logits);
    const int B = lv.dim(0), K = lv.dim(1);
    if (static_cast<int>(labels.size()) != B) throw domain_error("softmax_ce: labels size != batch");
    auto op = std::make_unique<SoftmaxCeOp<T>>(labels);
    op->probs = Tensor<T>({B, K});
    T loss = 0;
    for (int b = 0; b < B; ++b) {
        const T* row = lv.data() + static_cast<size_t>(b) * K;
        T* p = op->probs.data() + static_cast<size_t>(b) * K;
        T m = row[0];
        for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
        T z = 0;
        for (int k = 0; k < K; ++k) {
            p[k] = std::exp(row[k] - m);
            z += p[k];
        }
        for (int k = 0; k < K; ++k) p[k] /= z;
        loss -= std::log(std::max(p[labels[b]], T(1e-30)));
    }
    loss /= static_cast<T>(B);
    return g.emit(std::move(op), {logits.id}, Tensor<T>::scalar(loss));
}

}  // namespace cellgan
