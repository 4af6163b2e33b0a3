#pragma once

#include <map>
#include <string>
#include <vector>

#include "cellgan/ops.hpp"
#include "cellgan/params.hpp"
#include "cellgan/rng.hpp"
#include "cellgan/trainutils.hpp"

namespace cellgan {

/// Discriminator knobs. The encoder walks the channel table from the input
/// resolution down to 8 (input conv at R, then log2(R/8) DownBlocks), so the
/// stock 256 configuration is input conv -> 32, five blocks to 8x8x512.
struct DiscriminatorSpec {
    int num_classes = 5;
    int resolution = 256;
    double width = 1.0;
    bool use_patchgan = true;
    bool use_sn = true;

    static const std::map<int, int>& full_schedule() {
        static const std::map<int, int> table{{8, 512},  {16, 512},  {32, 256},
                                              {64, 128}, {128, 64}, {256, 32}};
        return table;
    }

    int channels_at(int res) const {
        const auto& table = full_schedule();
        auto it = table.find(res);
        if (it == table.end())
            throw config_error("discriminator: no schedule entry for resolution");
        return std::max(4, static_cast<int>(std::lround(it->second * width)));
    }

    int feat8_channels() const { return channels_at(8); }
    int target_size() const { return resolution / 2; }  // decoder output extent

    void validate() const {
        if (num_classes < 1) throw config_error("discriminator: num_classes must be >= 1");
        if (width <= 0.0) throw config_error("discriminator: width must be positive");
        if (resolution < 16 || resolution > 256 || (resolution & (resolution - 1)) != 0)
            throw config_error("discriminator: resolution must be a power of two in [16, 256]");
    }
};

/// Projection/PatchGAN discriminator with two reconstruction decoders.
/// Weights are bound to a graph once per forward via `bind`, which also runs
/// the spectral-norm power iteration, so a real and a fake pass inside one
/// graph see identical normalized weights.
template <typename T>
class Discriminator {
public:
    struct Bound {
        Graph<T>* g = nullptr;
        std::map<std::string, Value> weights;
    };
    struct Encoded {
        Value feat16, feat8;
    };

    Discriminator(DiscriminatorSpec spec, Rng& rng) : spec_(spec) {
        spec_.validate();
        const int R = spec_.resolution;
        add_conv("in.conv", spec_.channels_at(R), 3, 3, rng);
        int in_c = spec_.channels_at(R);
        for (int res = R / 2; res >= 8; res /= 2) {
            const std::string p = "down" + std::to_string(res) + ".";
            const int out_c = spec_.channels_at(res);
            add_conv(p + "main1", out_c, in_c, 3, rng);
            add_conv(p + "main2", out_c, out_c, 3, rng);
            add_conv(p + "skip", out_c, in_c, 1, rng);
            in_c = out_c;
        }
        const int c8 = spec_.feat8_channels();
        if (spec_.use_patchgan) {
            add_conv("head.conv", 1, c8, 1, rng);
        } else {
            params_.add("head.fc.w", he_normal<T>({1, c8}, c8, rng));
            params_.add("head.fc.b", Tensor<T>({1}));
            sn_init("head.fc.w", rng);
        }
        params_.add("embed", normal_init<T>({spec_.num_classes, c8}, 1.0 / std::sqrt(c8), rng));
        add_decoder("dec_rs", rng);
        add_decoder("dec_cr", rng);
    }

    const DiscriminatorSpec& spec() const { return spec_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    /// Bind every weight to `g` (one spectral-norm division each when
    /// enabled). `sn_update` advances the power iteration.
    Bound bind(Graph<T>& g, bool sn_update = false) {
        Bound bd;
        bd.g = &g;
        for (auto& [name, st] : sn_) {
            bd.weights[name] = spec_.use_sn
                                   ? bind_spectral(g, params_, params_.find(name), st, sn_update)
                                   : g.param(params_, params_.find(name));
        }
        return bd;
    }

    /// Input conv + DownBlocks; exposes the 16^2 and 8^2 maps.
    Encoded encode(Bound& bd, Value img) {
        Graph<T>& g = *bd.g;
        const Tensor<T>& iv = g.val(img);
        if (iv.rank() != 4 || iv.dim(1) != 3 || iv.dim(2) != spec_.resolution ||
            iv.dim(3) != spec_.resolution)
            throw domain_error("encode: expected [B,3," + std::to_string(spec_.resolution) + "," +
                               std::to_string(spec_.resolution) + "], got " +
                               shape_str(iv.shape()));
        Value x = leaky_relu(g, conv(bd, "in.conv", img, 1, 1), T(0.2));
        Encoded enc;
        if (spec_.resolution == 16) enc.feat16 = x;
        for (int res = spec_.resolution / 2; res >= 8; res /= 2) {
            x = down_block(bd, x, res);
            if (res == 16) enc.feat16 = x;
            if (res == 8) enc.feat8 = x;
        }
        return enc;
    }

    /// Residual downsampling block producing the `out_res` feature map:
    /// main = conv3x3/2 -> LReLU -> conv3x3; skip = avgpool2 -> conv1x1.
    Value down_block(Bound& bd, Value x, int out_res) {
        Graph<T>& g = *bd.g;
        const std::string p = "down" + std::to_string(out_res) + ".";
        Value main = leaky_relu(g, conv(bd, p + "main1", x, 2, 1), T(0.2));
        main = conv(bd, p + "main2", main, 1, 1);
        Value skip = conv(bd, p + "skip", avg_pool2(g, x), 1, 0);
        return leaky_relu(g, add(g, main, skip), T(0.2));
    }

    /// Per-position logits via the 1x1 head ([B,H,W]); with PatchGAN off,
    /// global-sum pooling + one linear unit ([B,1,1]).
    Value patch_logits(Bound& bd, Value feat8) {
        Graph<T>& g = *bd.g;
        const Tensor<T>& fv = g.val(feat8);
        if (spec_.use_patchgan) {
            Value m = conv(bd, "head.conv", feat8, 1, 0);
            return reshape(g, m, {fv.dim(0), fv.dim(2), fv.dim(3)});
        }
        Value pooled = sum_spatial(g, feat8);
        Value out = linear(g, pooled, bd.weights.at("head.fc.w"), bias(bd, "head.fc.b"));
        return reshape(g, out, {fv.dim(0), 1, 1});
    }

    /// Projection map: out[b,h,w] = <e_{y_b}, feat8[b,:,h,w]> ([B,H,W]).
    Value project_class(Bound& bd, Value feat8, const std::vector<int>& y) {
        Graph<T>& g = *bd.g;
        const Tensor<T>& fv = g.val(feat8);
        Value table = g.param(params_, params_.find("embed"));
        Value m = proj_inner(g, feat8, table, y);
        return reshape(g, m, {fv.dim(0), fv.dim(2), fv.dim(3)});
    }

    /// Unconditional + projection logits over an already-encoded feature map.
    Value logits_from(Bound& bd, const Encoded& enc, const std::vector<int>& y) {
        Graph<T>& g = *bd.g;
        Value uncond = patch_logits(bd, enc.feat8);
        Value proj = project_class(bd, enc.feat8, y);
        if (spec_.use_patchgan) return add(g, uncond, proj);
        // pooled head: fold the projection map over positions to match [B,1,1]
        const Tensor<T>& pv = g.val(proj);
        Value proj4 = reshape(g, proj, {pv.dim(0), 1, pv.dim(1), pv.dim(2)});
        Value folded = reshape(g, sum_spatial(g, proj4), {pv.dim(0), 1, 1});
        return add(g, uncond, folded);
    }

    /// Full conditional discriminator: encode once, add both heads.
    Value discriminate(Bound& bd, Value img, const std::vector<int>& y) {
        Encoded enc = encode(bd, img);
        return logits_from(bd, enc, y);
    }

    /// feat8 -> image at half the input resolution (tanh range).
    Value decode_resize(Bound& bd, Value feat8) { return run_decoder(bd, "dec_rs", feat8); }

    /// 8x8 quadrant of feat16 -> image at half the input resolution.
    /// Quadrants: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    Value decode_crop(Bound& bd, Value feat16, int quadrant) {
        Graph<T>& g = *bd.g;
        if (quadrant < 0 || quadrant > 3) throw domain_error("decode_crop: quadrant not in 0..3");
        const int r0 = (quadrant / 2) * 8, c0 = (quadrant % 2) * 8;
        Value q = crop(g, feat16, r0, c0, 8, 8);
        return run_decoder(bd, "dec_cr", q);
    }

private:
    void add_conv(const std::string& name, int out_c, int in_c, int k, Rng& rng) {
        params_.add(name + ".w", he_normal<T>({out_c, in_c, k, k}, in_c * k * k, rng));
        params_.add(name + ".b", Tensor<T>({out_c}));
        sn_init(name + ".w", rng);
    }
    void sn_init(const std::string& wname, Rng& rng) {
        sn_[wname].init(params_.at(params_.find(wname)).value, rng);
    }
    void add_decoder(const std::string& dec, Rng& rng) {
        int c = spec_.feat8_channels();
        const int stages = ilog2(spec_.target_size() / 8);
        for (int s = 0; s < stages; ++s) {
            const int next = std::max(4, c / 2);
            add_conv(dec + ".s" + std::to_string(s), next, c, 3, rng);
            c = next;
        }
        add_conv(dec + ".out", 3, c, 3, rng);
    }
    static int ilog2(int v) {
        int n = 0;
        while ((1 << n) < v) ++n;
        return n;
    }

    Value bias(Bound& bd, const std::string& name) {
        return bd.g->param(params_, params_.find(name));
    }
    Value conv(Bound& bd, const std::string& name, Value x, int stride, int pad) {
        return conv2d(*bd.g, x, bd.weights.at(name + ".w"), bias(bd, name + ".b"), stride, pad);
    }
    Value run_decoder(Bound& bd, const std::string& dec, Value x) {
        Graph<T>& g = *bd.g;
        const Tensor<T>& xv = g.val(x);
        if (xv.dim(1) != spec_.feat8_channels() || xv.dim(2) != 8 || xv.dim(3) != 8)
            throw domain_error(dec + ": expected [B," +
                               std::to_string(spec_.feat8_channels()) + ",8,8], got " +
                               shape_str(xv.shape()));
        const int stages = ilog2(spec_.target_size() / 8);
        for (int s = 0; s < stages; ++s) {
            x = upsample_nearest2(g, x);
            x = leaky_relu(g, conv(bd, dec + ".s" + std::to_string(s), x, 1, 1), T(0.2));
        }
        return tanh_act(g, conv(bd, dec + ".out", x, 1, 1));
    }

    DiscriminatorSpec spec_;
    ParamStore<T> params_;
    std::map<std::string, PowerIterState<T>> sn_;

public:
    /// Power-iteration state, exposed for checkpointing.
    std::map<std::string, PowerIterState<T>>& sn_states() { return sn_; }
    const std::map<std::string, PowerIterState<T>>& sn_states() const { return sn_; }
};

}  // namespace cellgan
