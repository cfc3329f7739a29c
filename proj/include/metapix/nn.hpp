#pragma once

// Network definitions. Both nets are expressed as pure functions of an
// explicit parameter vector, so a training step can substitute updated
// parameters (the ephemeral inner step) without touching the stored ones.

#include <optional>
#include <string>
#include <vector>

#include "metapix/ops.hpp"

namespace metapix::nn {

enum class Domain { Source, Target };

inline const char* domain_name(Domain d) { return d == Domain::Source ? "source" : "target"; }

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

// Kaiming-uniform fan-in bound for a 3x3 conv.
template <class Real>
Tensor<Real> kaiming_conv(int out_ch, int in_ch, std::uint64_t seed) {
    auto w = Tensor<Real>::zeros({out_ch, in_ch, 3, 3});
    Rng rng(seed);
    const double bound = std::sqrt(6.0 / (double(in_ch) * 9.0));
    for (long k = 0; k < w.size(); ++k) (*w.values)[k] = Real(rng.uniform(-bound, bound));
    return w;
}

// ---------------------------------------------------------------------------
// segmentation network: 5 conv-conv-pool encoder blocks, FCN-8 style decoder
// with skip fusions from blocks 3 and 4. Blocks 1..split_at exist once per
// domain; the decoder follows the deepest block's sharing (duplicated only
// when split_at = 5, where nothing is shared between the two tasks).
// ---------------------------------------------------------------------------

struct SegConfig {
    int num_classes = 5;
    int split_at = 1;
    std::vector<int> widths = {8, 16, 32, 32, 32};
};

template <class Real>
struct SegNet {
    struct ConvIds {
        int w = -1, b = -1;
    };
    struct BlockIds {
        ConvIds c1, c2;
    };
    struct DecoderIds {
        ConvIds score3, score4, score5, fuse4, fuse3, up1, up2, up3;
    };

    SegConfig cfg;
    std::vector<Tensor<Real>> params;
    std::vector<std::string> names;
    BlockIds blocks[2][5];     // [domain][block]; shared blocks alias the same ids
    DecoderIds decoder[2];     // aliases unless split_at == 5

    std::vector<Tensor<Real>> param_view() const { return params; }

    // Parameter ids touched by a forward pass for `d` (head + shared).
    std::vector<int> domain_param_ids(Domain d) const {
        std::vector<int> ids;
        const int di = d == Domain::Source ? 0 : 1;
        auto push = [&](const ConvIds& c) {
            ids.push_back(c.w);
            ids.push_back(c.b);
        };
        for (int i = 0; i < 5; ++i) {
            push(blocks[di][i].c1);
            push(blocks[di][i].c2);
        }
        const DecoderIds& dec = decoder[di];
        for (const ConvIds* c : {&dec.score3, &dec.score4, &dec.score5, &dec.fuse4, &dec.fuse3,
                                 &dec.up1, &dec.up2, &dec.up3})
            push(*c);
        return ids;
    }

    // Ids private to one domain's head (not used by the other pass).
    std::vector<int> head_param_ids(Domain d) const {
        auto mine = domain_param_ids(d);
        auto other = domain_param_ids(d == Domain::Source ? Domain::Target : Domain::Source);
        std::vector<int> out;
        for (int id : mine)
            if (std::find(other.begin(), other.end(), id) == other.end()) out.push_back(id);
        return out;
    }

    std::vector<int> shared_param_ids() const {
        auto a = domain_param_ids(Domain::Source);
        auto b = domain_param_ids(Domain::Target);
        std::vector<int> out;
        for (int id : a)
            if (std::find(b.begin(), b.end(), id) != b.end()) out.push_back(id);
        return out;
    }

    Tensor<Real> forward(const std::vector<Tensor<Real>>& p, const Tensor<Real>& image,
                         Domain d) const {
        require(image.shape.size() == 4 && image.shape[1] == 3,
                "seg_forward: expected [B,3,H,W], got " + shape_str(image.shape));
        const int H = image.shape[2], W = image.shape[3];
        // 3 decoder upsamplings fix the output scale at H/8; deeper pools
        // degrade to identity at 1x1.
        {
            int h = H, w = W;
            bool ok = H % 8 == 0 && W % 8 == 0 && H >= 8 && W >= 8;
            for (int i = 0; i < 5 && ok; ++i) {
                if (h > 1) ok = ok && h % 2 == 0;
                if (w > 1) ok = ok && w % 2 == 0;
                h = std::max(1, h / 2);
                w = std::max(1, w / 2);
            }
            require(ok, "seg_forward: H,W must be divisible by 8 and halve evenly per pool "
                        "(multiples of 32 recommended), got " +
                            shape_str(image.shape));
        }

        const int di = d == Domain::Source ? 0 : 1;
        auto conv_block = [&](const Tensor<Real>& x, const ConvIds& c) {
            return ops::relu(ops::add_bias(ops::conv2d(x, p[size_t(c.w)]), p[size_t(c.b)]));
        };

        Tensor<Real> x = image;
        Tensor<Real> pooled[5];
        for (int i = 0; i < 5; ++i) {
            x = conv_block(x, blocks[di][i].c1);
            x = conv_block(x, blocks[di][i].c2);
            if (x.shape[2] > 1 && x.shape[3] > 1) x = ops::maxpool2x2(x);
            pooled[i] = x;
        }

        const DecoderIds& dec = decoder[di];
        auto score = [&](const Tensor<Real>& in, const ConvIds& c) {
            return ops::add_bias(ops::conv2d(in, p[size_t(c.w)]), p[size_t(c.b)]);
        };
        auto s5 = score(pooled[4], dec.score5);
        auto s4 = score(pooled[3], dec.score4);
        auto s3 = score(pooled[2], dec.score3);

        Tensor<Real> u = s5;
        if (s4.shape[2] > u.shape[2]) u = ops::upsample2x(u);
        u = score(u, dec.fuse4);
        u = ops::add(u, s4);
        if (s3.shape[2] > u.shape[2]) u = ops::upsample2x(u);
        u = score(u, dec.fuse3);
        u = ops::add(u, s3);
        for (const ConvIds* c : {&dec.up1, &dec.up2, &dec.up3}) {
            if (u.shape[2] < H) u = ops::upsample2x(u);
            u = score(u, *c);
        }
        require(u.shape[2] == H && u.shape[3] == W, "seg_forward: internal decoder shape error");
        return u;
    }
};

template <class Real>
SegNet<Real> build_seg_net(int num_classes, int split_at, const std::vector<int>& widths,
                           std::uint64_t seed) {
    require(split_at >= 0 && split_at <= 5,
            "build_seg_net: split_at must be in [0,5], got " + std::to_string(split_at));
    require(widths.size() == 5, "build_seg_net: expected 5 block widths");
    require(num_classes >= 2, "build_seg_net: need at least 2 classes");

    SegNet<Real> net;
    net.cfg = SegConfig{num_classes, split_at, widths};

    // Initialization streams are keyed by the structural name without the
    // domain, so per-domain copies start identical and the same seed yields
    // the same block tensors for every split_at.
    auto add_conv = [&](const std::string& name, int in_ch, int out_ch, const std::string& stream,
                        bool zero_init = false) {
        typename SegNet<Real>::ConvIds ids;
        ids.w = int(net.params.size());
        net.params.push_back(zero_init ? Tensor<Real>::zeros({out_ch, in_ch, 3, 3})
                                       : kaiming_conv<Real>(out_ch, in_ch,
                                                            mix_seed(seed, stream + ".w")));
        net.params.back().requires_grad = true;
        net.names.push_back(name + ".w");
        ids.b = int(net.params.size());
        net.params.push_back(Tensor<Real>::zeros({out_ch}));
        net.params.back().requires_grad = true;
        net.names.push_back(name + ".b");
        return ids;
    };

    for (int i = 0; i < 5; ++i) {
        const int in_ch = i == 0 ? 3 : widths[size_t(i) - 1];
        const int out_ch = widths[size_t(i)];
        const std::string base = "enc" + std::to_string(i + 1);
        if (i < split_at) {
            for (int di = 0; di < 2; ++di) {
                const std::string dom = di == 0 ? "src" : "tgt";
                net.blocks[di][i].c1 = add_conv(base + "." + dom + ".conv1", in_ch, out_ch, base + ".conv1");
                net.blocks[di][i].c2 = add_conv(base + "." + dom + ".conv2", out_ch, out_ch, base + ".conv2");
            }
        } else {
            auto c1 = add_conv(base + ".conv1", in_ch, out_ch, base + ".conv1");
            auto c2 = add_conv(base + ".conv2", out_ch, out_ch, base + ".conv2");
            for (int di = 0; di < 2; ++di) {
                net.blocks[di][i].c1 = c1;
                net.blocks[di][i].c2 = c2;
            }
        }
    }

    const int C = num_classes;
    auto add_decoder = [&](const std::string& prefix) {
        typename SegNet<Real>::DecoderIds dec;
        dec.score3 = add_conv(prefix + "score3", widths[2], C, "dec.score3");
        dec.score4 = add_conv(prefix + "score4", widths[3], C, "dec.score4");
        dec.score5 = add_conv(prefix + "score5", widths[4], C, "dec.score5");
        dec.fuse4 = add_conv(prefix + "fuse4", C, C, "dec.fuse4");
        dec.fuse3 = add_conv(prefix + "fuse3", C, C, "dec.fuse3");
        dec.up1 = add_conv(prefix + "up1", C, C, "dec.up1");
        dec.up2 = add_conv(prefix + "up2", C, C, "dec.up2");
        dec.up3 = add_conv(prefix + "up3", C, C, "dec.up3");
        return dec;
    };
    if (split_at == 5) {
        net.decoder[0] = add_decoder("dec.src.");
        net.decoder[1] = add_decoder("dec.tgt.");
    } else {
        auto dec = add_decoder("dec.");
        net.decoder[0] = dec;
        net.decoder[1] = dec;
    }
    return net;
}

// ---------------------------------------------------------------------------
// weighting network: U-Net with 3 down / 3 up stages over concat(image,
// one-hot label); sigmoid output in (0,1). The final conv starts at zero so
// every initial weight is exactly 0.5.
// ---------------------------------------------------------------------------

struct WeightConfig {
    int num_classes = 5;
    int out_channels = 1;  // 1 or num_classes
    std::vector<int> widths = {8, 16, 32};
};

template <class Real>
struct WeightNet {
    struct ConvIds {
        int w = -1, b = -1;
    };

    WeightConfig cfg;
    std::vector<Tensor<Real>> params;
    std::vector<std::string> names;
    ConvIds d1a, d1b, d2a, d2b, d3a, d3b, bott, u3a, u3b, u2a, u2b, u1a, u1b, head;

    std::vector<Tensor<Real>> param_view() const { return params; }

    Tensor<Real> forward(const std::vector<Tensor<Real>>& p, const Tensor<Real>& image,
                         const Tensor<Real>& label_onehot) const {
        require(image.shape.size() == 4 && image.shape[1] == 3,
                "weight_forward: expected [B,3,H,W] image, got " + shape_str(image.shape));
        require(label_onehot.shape.size() == 4 && label_onehot.shape[1] == cfg.num_classes,
                "weight_forward: one-hot channels " + shape_str(label_onehot.shape) +
                    " do not match configured classes " + std::to_string(cfg.num_classes));
        require(image.shape[0] == label_onehot.shape[0] && image.shape[2] == label_onehot.shape[2] &&
                    image.shape[3] == label_onehot.shape[3],
                "weight_forward: image/label shapes differ");
        const int H = image.shape[2], W = image.shape[3];
        require(H % 8 == 0 && W % 8 == 0,
                "weight_forward: H,W must be divisible by 8 (3 pooling stages), got " +
                    shape_str(image.shape));

        auto cr = [&](const Tensor<Real>& x, const ConvIds& c) {
            return ops::relu(ops::add_bias(ops::conv2d(x, p[size_t(c.w)]), p[size_t(c.b)]));
        };

        auto x = ops::concat_channels(image, label_onehot);
        auto skip1 = cr(cr(x, d1a), d1b);
        x = ops::maxpool2x2(skip1);
        auto skip2 = cr(cr(x, d2a), d2b);
        x = ops::maxpool2x2(skip2);
        auto skip3 = cr(cr(x, d3a), d3b);
        x = ops::maxpool2x2(skip3);
        x = cr(x, bott);

        x = cr(ops::upsample2x(x), u3a);
        x = cr(ops::concat_channels(x, skip3), u3b);
        x = cr(ops::upsample2x(x), u2a);
        x = cr(ops::concat_channels(x, skip2), u2b);
        x = cr(ops::upsample2x(x), u1a);
        x = cr(ops::concat_channels(x, skip1), u1b);

        auto logits = ops::add_bias(ops::conv2d(x, p[size_t(head.w)]), p[size_t(head.b)]);
        return ops::sigmoid(logits);
    }
};

template <class Real>
WeightNet<Real> build_weight_net(int num_classes, int out_channels, const std::vector<int>& widths,
                                 std::uint64_t seed) {
    require(out_channels == 1 || out_channels == num_classes,
            "build_weight_net: out_channels must be 1 or num_classes, got " +
                std::to_string(out_channels));
    require(widths.size() == 3, "build_weight_net: expected 3 stage widths");

    WeightNet<Real> net;
    net.cfg = WeightConfig{num_classes, out_channels, widths};

    auto add_conv = [&](const std::string& name, int in_ch, int out_ch, bool zero_init = false) {
        typename WeightNet<Real>::ConvIds ids;
        ids.w = int(net.params.size());
        net.params.push_back(zero_init
                                 ? Tensor<Real>::zeros({out_ch, in_ch, 3, 3})
                                 : kaiming_conv<Real>(out_ch, in_ch, mix_seed(seed, name + ".w")));
        net.params.back().requires_grad = true;
        net.names.push_back(name + ".w");
        ids.b = int(net.params.size());
        net.params.push_back(Tensor<Real>::zeros({out_ch}));
        net.params.back().requires_grad = true;
        net.names.push_back(name + ".b");
        return ids;
    };

    const int w0 = widths[0], w1 = widths[1], w2 = widths[2];
    net.d1a = add_conv("wnet.d1a", 3 + num_classes, w0);
    net.d1b = add_conv("wnet.d1b", w0, w0);
    net.d2a = add_conv("wnet.d2a", w0, w1);
    net.d2b = add_conv("wnet.d2b", w1, w1);
    net.d3a = add_conv("wnet.d3a", w1, w2);
    net.d3b = add_conv("wnet.d3b", w2, w2);
    net.bott = add_conv("wnet.bott", w2, w2);
    net.u3a = add_conv("wnet.u3a", w2, w2);
    net.u3b = add_conv("wnet.u3b", 2 * w2, w2);
    net.u2a = add_conv("wnet.u2a", w2, w1);
    net.u2b = add_conv("wnet.u2b", 2 * w1, w1);
    net.u1a = add_conv("wnet.u1a", w1, w0);
    net.u1b = add_conv("wnet.u1b", 2 * w0, w0);
    net.head = add_conv("wnet.head", w0, out_channels, /*zero_init=*/true);
    return net;
}

// ---------------------------------------------------------------------------
// Adam with optional polynomial learning-rate decay
// ---------------------------------------------------------------------------

enum class Decay { None, Polynomial };

struct OptimConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    Decay decay = Decay::None;
    double power = 0.9;
    long total_steps = 0;
};

inline double poly_lr(double base, long t, long total, double power) {
    if (total <= 0) return base;
    const double frac = std::min(1.0, double(t) / double(total));
    return base * std::pow(1.0 - frac, power);
}

template <class Real>
struct Adam {
    OptimConfig cfg;
    std::vector<Tensor<Real>> m, v;
    long t = 0;

    double effective_lr() const {
        return cfg.decay == Decay::Polynomial ? poly_lr(cfg.lr, t, cfg.total_steps, cfg.power)
                                              : cfg.lr;
    }

    // Standard bias-corrected update at lr(t); t advances once per call.
    // Any non-finite gradient element rejects the whole step.
    bool step(std::vector<Tensor<Real>>& params, const std::vector<Tensor<Real>>& grads) {
        require(params.size() == grads.size(), "adam: parameter/gradient count mismatch");
        for (size_t i = 0; i < params.size(); ++i) {
            require(params[i].shape == grads[i].shape,
                    "adam: shape mismatch at parameter " + std::to_string(i));
            if (!grads[i].all_finite()) return false;
        }
        const double lr = effective_lr();
        const double bc1 = 1.0 - std::pow(cfg.beta1, double(t + 1));
        const double bc2 = 1.0 - std::pow(cfg.beta2, double(t + 1));
        for (size_t i = 0; i < params.size(); ++i) {
            Real* p = params[i].data();
            const Real* g = grads[i].data();
            Real* mi = m[i].data();
            Real* vi = v[i].data();
            for (long k = 0; k < params[i].size(); ++k) {
                const double gk = double(g[k]);
                const double mk = cfg.beta1 * double(mi[k]) + (1.0 - cfg.beta1) * gk;
                const double vk = cfg.beta2 * double(vi[k]) + (1.0 - cfg.beta2) * gk * gk;
                mi[k] = Real(mk);
                vi[k] = Real(vk);
                p[k] = Real(double(p[k]) - lr * (mk / bc1) / (std::sqrt(vk / bc2) + cfg.eps));
            }
        }
        ++t;
        return true;
    }
};

template <class Real>
Adam<Real> make_adam(const std::vector<Tensor<Real>>& params, OptimConfig cfg) {
    Adam<Real> opt;
    opt.cfg = cfg;
    for (const auto& p : params) {
        opt.m.push_back(Tensor<Real>::zeros(p.shape));
        opt.v.push_back(Tensor<Real>::zeros(p.shape));
    }
    return opt;
}

}  // namespace metapix::nn
