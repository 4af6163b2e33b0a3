#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cellgan/ops.hpp"
#include "cellgan/params.hpp"
#include "cellgan/rng.hpp"

namespace cellgan {

/// Generator architecture knobs. The channel schedule is the full-resolution
/// table truncated at `resolution` and scaled by `width`; SGC connections
/// pair every resolution l >= 8 with 8l when 8l fits the output resolution
/// (at 256 that yields the stock (8,64), (16,128), (32,256)).
struct GeneratorSpec {
    int z_dim = 128;
    int num_classes = 5;
    int resolution = 256;
    double width = 1.0;
    bool use_mapping = true;
    bool use_sgc = true;

    static const std::map<int, int>& full_schedule() {
        static const std::map<int, int> table{{4, 512},  {8, 512},   {16, 256}, {32, 128},
                                              {64, 128}, {128, 64}, {256, 32}};
        return table;
    }

    int channels_at(int res) const {
        const auto& table = full_schedule();
        auto it = table.find(res);
        if (it == table.end()) throw config_error("generator: no schedule entry for resolution");
        const int c = static_cast<int>(std::lround(it->second * width));
        return std::max(4, c);
    }

    std::vector<std::pair<int, int>> sgc_pairs() const {
        std::vector<std::pair<int, int>> pairs;
        for (int low = 8; low * 8 <= resolution; low *= 2) pairs.push_back({low, low * 8});
        return pairs;
    }

    void validate() const {
        if (z_dim != 128) throw config_error("generator: z_dim is fixed at 128");
        if (num_classes < 1) throw config_error("generator: num_classes must be >= 1");
        if (width <= 0.0) throw config_error("generator: width must be positive");
        if (resolution < 16 || resolution > 256 ||
            (resolution & (resolution - 1)) != 0)
            throw config_error("generator: resolution must be a power of two in [16, 256]");
    }
};

/// Class-conditional generator. Owns its parameters; every forward is a pure
/// function of (params, z, y) assembled on a caller-provided graph so both
/// inference and training reuse the same code path.
template <typename T>
class Generator {
public:
    Generator(GeneratorSpec spec, Rng& rng) : spec_(spec) {
        spec_.validate();
        const int D = spec_.z_dim;  // embedding dim == z dim by construction
        if (spec_.use_mapping) {
            int in_dim = spec_.num_classes;
            for (int i = 0; i < 4; ++i) {
                add_linear("map." + std::to_string(i), D, in_dim, rng);
                in_dim = D;
            }
        }
        const int c4 = spec_.channels_at(4);
        params_.add("seed.w", he_normal<T>({c4 * 16, D}, D, rng));
        params_.add("seed.b", Tensor<T>({c4 * 16}));

        int in_c = c4;
        for (int res = 8; res <= spec_.resolution; res *= 2) {
            const std::string p = "up" + std::to_string(res) + ".";
            const int out_c = spec_.channels_at(res);
            params_.add(p + "conv.w", he_normal<T>({out_c, in_c, 3, 3}, in_c * 9, rng));
            params_.add(p + "conv.b", Tensor<T>({out_c}));
            if (spec_.use_mapping) {
                // affine heads mapping c -> (y_s, y_b); start near identity
                params_.add(p + "aff_s.w", normal_init<T>({out_c, D}, 0.05, rng));
                params_.add(p + "aff_s.b", Tensor<T>::full({out_c}, T(1)));
                params_.add(p + "aff_b.w", normal_init<T>({out_c, D}, 0.05, rng));
                params_.add(p + "aff_b.b", Tensor<T>({out_c}));
            } else {
                // ablation: per-block normalization parameters, no class input
                params_.add(p + "norm.s", Tensor<T>::full({out_c, 1}, T(1)));
                params_.add(p + "norm.b", Tensor<T>({out_c, 1}));
            }
            in_c = out_c;
        }
        if (spec_.use_sgc) {
            for (auto [low, high] : spec_.sgc_pairs()) {
                const std::string p = sgc_prefix(low, high);
                const int cl = spec_.channels_at(low);
                const int ch = spec_.channels_at(high);
                const int mid = std::max(1, cl / 4);
                params_.add(p + "att.w", he_normal<T>({1, cl, 1, 1}, cl, rng));
                params_.add(p + "att.b", Tensor<T>({1}));
                params_.add(p + "fc1.w", he_normal<T>({mid, cl}, cl, rng));
                params_.add(p + "fc1.b", Tensor<T>({mid}));
                params_.add(p + "ln.g", Tensor<T>::full({mid}, T(1)));
                params_.add(p + "ln.b", Tensor<T>({mid}));
                params_.add(p + "fc2.w", he_normal<T>({ch, mid}, mid, rng));
                params_.add(p + "fc2.b", Tensor<T>({ch}));
            }
        }
        const int cr = spec_.channels_at(spec_.resolution);
        params_.add("out.conv.w", he_normal<T>({3, cr, 3, 3}, cr * 9, rng));
        params_.add("out.conv.b", Tensor<T>({3}));
    }

    const GeneratorSpec& spec() const { return spec_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    /// One-hot labels through four FC(128) + LeakyReLU(0.2) stages -> [B, 128].
    Value map_class(Graph<T>& g, const std::vector<int>& y) {
        if (!spec_.use_mapping) throw state_error("map_class: mapping network disabled");
        const int B = static_cast<int>(y.size());
        Tensor<T> onehot({B, spec_.num_classes});
        for (int b = 0; b < B; ++b) {
            if (y[static_cast<size_t>(b)] < 0 || y[static_cast<size_t>(b)] >= spec_.num_classes)
                throw domain_error("map_class: label out of range");
            onehot[static_cast<size_t>(b) * spec_.num_classes + y[static_cast<size_t>(b)]] = T(1);
        }
        Value h = g.constant(std::move(onehot));
        for (int i = 0; i < 4; ++i) {
            const std::string p = "map." + std::to_string(i);
            h = linear(g, h, pv(g, p + ".w"), pv(g, p + ".b"));
            h = leaky_relu(g, h, T(0.2));
        }
        return h;
    }

    /// z -> learned 4x4 seed map [B, C4, 4, 4].
    Value seed4(Graph<T>& g, Value z) {
        const Tensor<T>& zv = g.val(z);
        if (zv.rank() != 2 || zv.dim(1) != spec_.z_dim)
            throw domain_error("seed4: z must be [B, " + std::to_string(spec_.z_dim) + "]");
        Value h = linear(g, z, pv(g, "seed.w"), pv(g, "seed.b"));
        return reshape(g, h, {zv.dim(0), spec_.channels_at(4), 4, 4});
    }

    /// Upsample x2 -> conv3x3 -> AdaIN(y_s, y_b) -> LeakyReLU(0.2).
    /// `c` is the class embedding ([B,128]); ignored when mapping is off.
    Value up_block(Graph<T>& g, Value x, Value c, int out_res) {
        const std::string p = "up" + std::to_string(out_res) + ".";
        Value h = upsample_nearest2(g, x);
        h = conv2d(g, h, pv(g, p + "conv.w"), pv(g, p + "conv.b"), 1, 1);
        Value s, t;
        if (spec_.use_mapping) {
            if (!c.valid()) throw state_error("up_block: missing class embedding");
            s = linear(g, c, pv(g, p + "aff_s.w"), pv(g, p + "aff_s.b"));
            t = linear(g, c, pv(g, p + "aff_b.w"), pv(g, p + "aff_b.b"));
        } else {
            // broadcast the per-block [C,1] parameters across the batch
            Value ones = g.constant(Tensor<T>::full({g.val(h).dim(0), 1}, T(1)));
            s = linear(g, ones, pv(g, p + "norm.s"), Value{});
            t = linear(g, ones, pv(g, p + "norm.b"), Value{});
        }
        h = adain(g, h, s, t);
        return leaky_relu(g, h, T(0.2));
    }

    /// Attention pooling over the low-res map -> per-sample context [B, C_low].
    Value sgc_pool(Graph<T>& g, Value low, int low_res, int high_res) {
        const std::string p = sgc_prefix(low_res, high_res);
        Value logits = conv2d(g, low, pv(g, p + "att.w"), pv(g, p + "att.b"), 1, 0);
        return attn_pool(g, low, logits);
    }

    /// Context -> bottleneck -> sigmoid gates, applied multiplicatively.
    Value sgc_apply(Graph<T>& g, Value high, Value context, int low_res, int high_res) {
        const std::string p = sgc_prefix(low_res, high_res);
        if (g.val(context).dim(1) != spec_.channels_at(low_res))
            throw config_error("sgc_apply: context channels do not match the pair");
        Value h = linear(g, context, pv(g, p + "fc1.w"), pv(g, p + "fc1.b"));
        h = layer_norm(g, h, pv(g, p + "ln.g"), pv(g, p + "ln.b"));
        h = relu(g, h);
        h = linear(g, h, pv(g, p + "fc2.w"), pv(g, p + "fc2.b"));
        Value gate = sigmoid(g, h);
        return channel_gate(g, high, gate);
    }

    /// Full forward pass: [B, 3, R, R] in [-1, 1].
    Value build(Graph<T>& g, Value z, const std::vector<int>& y) {
        const Tensor<T>& zv = g.val(z);
        if (zv.dim(0) != static_cast<int>(y.size()))
            throw domain_error("generate: batch sizes of z and y differ");
        if (!zv.all_finite()) throw domain_error("generate: non-finite latent");
        Value c = spec_.use_mapping ? map_class(g, y) : Value{};
        const auto pairs = spec_.use_sgc ? spec_.sgc_pairs() : std::vector<std::pair<int, int>>{};

        Value x = seed4(g, z);
        std::map<int, Value> low_feats;  // resolutions that feed an SGC pair
        for (int res = 8; res <= spec_.resolution; res *= 2) {
            x = up_block(g, x, c, res);
            for (auto [low, high] : pairs) {
                if (low == res) low_feats[res] = x;
                if (high == res)
                    x = sgc_apply(g, x, sgc_pool(g, low_feats.at(low), low, high), low, high);
            }
        }
        x = conv2d(g, x, pv(g, "out.conv.w"), pv(g, "out.conv.b"), 1, 1);
        return tanh_act(g, x);
    }

    /// Value-only convenience for sampling.
    Tensor<T> generate(const Tensor<T>& z, const std::vector<int>& y) {
        Graph<T> g;
        Value out = build(g, g.input(z.clone()), y);
        return g.val(out).clone();
    }

private:
    Value pv(Graph<T>& g, const std::string& name) {
        return g.param(params_, params_.find(name));
    }
    void add_linear(const std::string& p, int out, int in, Rng& rng) {
        params_.add(p + ".w", he_normal<T>({out, in}, in, rng));
        params_.add(p + ".b", Tensor<T>({out}));
    }
    static std::string sgc_prefix(int low, int high) {
        return "sgc" + std::to_string(low) + "_" + std::to_string(high) + ".";
    }

    GeneratorSpec spec_;
    ParamStore<T> params_;
};

}  // namespace cellgan
