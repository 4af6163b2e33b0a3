#pragma once

#include "cellgan/ops.hpp"

namespace cellgan {

/// Every scalar term of the objective, as logged per step.
/// total_d = adv_d + recon + lambda_reg * r1.
template <typename T>
struct LossBreakdown {
    T adv_d = 0;
    T adv_g = 0;
    T recon = 0;
    T r1 = 0;
    T total_d = 0;
};

/// Hinge discriminator loss: mean over batch and patch positions of
/// max(0, 1 - real) + max(0, 1 + fake).
template <typename T>
inline Value hinge_d(Graph<T>& g, Value real_logits, Value fake_logits) {
    if (!g.val(real_logits).same_shape(g.val(fake_logits)))
        throw domain_error("hinge_d: logit shapes differ");
    Value lr = mean_all(g, relu(g, affine_scalar(g, real_logits, T(-1), T(1))));
    Value lf = mean_all(g, relu(g, affine_scalar(g, fake_logits, T(1), T(1))));
    return add(g, lr, lf);
}

/// Hinge generator loss: -mean(fake_logits).
template <typename T>
inline Value hinge_g(Graph<T>& g, Value fake_logits) {
    return affine_scalar(g, mean_all(g, fake_logits), T(-1), T(0));
}

/// Mean absolute error (the reconstruction term for one decoder path).
template <typename T>
inline Value recon_loss(Graph<T>& g, Value decoded, Value target) {
    if (!g.val(decoded).same_shape(g.val(target)))
        throw domain_error("recon_loss: shape mismatch " + shape_str(g.val(decoded).shape()) +
                           " vs " + shape_str(g.val(target).shape()));
    return mean_all(g, abs_val(g, add(g, decoded, target, T(-1))));
}

template <typename T>
inline T total_d_loss(T adv_d, T recon, T r1, T lambda_reg) {
    if (lambda_reg < T(0)) throw domain_error("total_d_loss: lambda_reg must be >= 0");
    return adv_d + recon + lambda_reg * r1;
}

/// R1 penalty on an already-built graph: logits are reduced to one scalar per
/// sample by summing patch positions, differentiated w.r.t. the image leaf x,
/// and the mean squared gradient norm is returned.
///
/// When lambda > 0 this also back-propagates the penalty itself: a
/// forward-over-reverse sweep leaves d(r1)/d(theta) contributions scaled by
/// lambda in every bound parameter store (exact Hessian-vector product, no
/// finite differences). The graph's node grads are consumed by this call.
template <typename T>
inline T r1_penalty_accumulate(Graph<T>& g, Value logits, Value x, T lambda) {
    Value s = sum_all(g, logits);
    g.backward(s, /*with_params=*/false);
    const Tensor<T>& gx = g.grad(x.id);
    const int batch = g.val(x).dim(0);
    const T value = dot_all(gx, gx) / static_cast<T>(batch);
    if (!std::isfinite(static_cast<double>(value)))
        throw numerical_error("r1_penalty: non-finite gradient norm");
    if (lambda != T(0)) {
        g.tangent_sweep(s, x, gx);
        g.add_param_grad_tangents(lambda * T(2) / static_cast<T>(batch));
    }
    return value;
}

/// Value-only convenience: build the logits with `build` (graph, image leaf)
/// and return the penalty at `real`.
template <typename T, typename F>
inline T r1_penalty(F&& build, const Tensor<T>& real) {
    Graph<T> g;
    Value x = g.input(real.clone());
    Value logits = build(g, x);
    return r1_penalty_accumulate(g, logits, x, T(0));
}

}  // namespace cellgan
