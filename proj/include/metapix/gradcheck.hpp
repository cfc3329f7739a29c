#pragma once

// Finite-difference gradient certification. The numeric side only ever calls
// forward evaluations under a NoGradScope, so it shares nothing with the
// engine's backward rules. All checks run in 64-bit.

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "metapix/meta.hpp"
#include "metapix/ops.hpp"

namespace metapix::gradcheck {

using LossFn = std::function<double(const std::vector<Tensor<double>>&)>;

struct CheckEntry {
    std::string param;
    long index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double abs_err = 0.0;
    double rel_err = 0.0;
};

struct CheckReport {
    std::string name;
    double tolerance = 0.0;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    long compared = 0;
    long below_floor = 0;  // |numeric| <= floor, excluded from the relative max
    bool finite = true;
    bool pass = false;
    std::vector<CheckEntry> worst;

    nlohmann::json to_json() const {
        nlohmann::json j{{"name", name},
                         {"tolerance", tolerance},
                         {"max_rel_err", max_rel_err},
                         {"max_abs_err", max_abs_err},
                         {"compared", compared},
                         {"below_floor", below_floor},
                         {"finite", finite},
                         {"pass", pass}};
        for (const auto& e : worst)
            j["worst"].push_back({{"param", e.param},
                                  {"index", e.index},
                                  {"analytic", e.analytic},
                                  {"numeric", e.numeric},
                                  {"rel_err", e.rel_err}});
        return j;
    }
};

inline constexpr double kRelErrFloor = 1e-10;

// Central differences (f(p+h) - f(p-h)) / 2h per parameter element, all other
// elements held fixed. Only loss_fn forward evaluations are performed here;
// parameters are passed as detached clones, so loss_fn decides for itself
// whether any graph machinery participates (the meta check needs its inner
// gradient step; plain forwards record nothing).
inline std::vector<std::vector<double>> finite_diff(const LossFn& loss_fn,
                                                    const std::vector<Tensor<double>>& params,
                                                    double h) {
    // Work on cloned storage so perturbations never touch the caller's data.
    std::vector<Tensor<double>> p;
    p.reserve(params.size());
    for (const auto& t : params) {
        p.push_back(t.clone());
        p.back().requires_grad = false;
    }

    std::vector<std::vector<double>> out(p.size());
    for (size_t i = 0; i < p.size(); ++i) {
        out[i].resize(size_t(p[i].size()));
        for (long k = 0; k < p[i].size(); ++k) {
            const double orig = (*p[i].values)[k];
            (*p[i].values)[k] = orig + h;
            const double f1 = loss_fn(p);
            (*p[i].values)[k] = orig - h;
            const double f2 = loss_fn(p);
            (*p[i].values)[k] = orig;
            out[i][k] = (f1 - f2) / (2.0 * h);
        }
    }
    return out;
}

// Compares analytic gradients against a numeric reference. The pass metric
// is the gradient-vector relative error in the infinity norm: every absolute
// deviation is measured against the gradient's magnitude scale max_i
// |numeric_i| (floored for the all-zero case). A per-element quotient cannot
// meet these tolerances even for an exact gradient, because central
// differences carry an absolute rounding noise around eps*|f|/h that
// swamps components far below the gradient scale.
inline CheckReport compare_gradients(const std::string& name,
                                     const std::vector<Tensor<double>>& analytic,
                                     const std::vector<std::vector<double>>& numeric,
                                     const std::vector<std::string>& param_names,
                                     double tolerance) {
    CheckReport rep;
    rep.name = name;
    rep.tolerance = tolerance;

    double scale = 0.0;
    for (const auto& col : numeric)
        for (double n : col) scale = std::max(scale, std::abs(n));
    const double denom = std::max(scale, kRelErrFloor);

    for (size_t i = 0; i < analytic.size(); ++i) {
        for (long k = 0; k < analytic[i].size(); ++k) {
            const double a = (*analytic[i].values)[k];
            const double n = numeric[i][size_t(k)];
            if (!std::isfinite(a) || !std::isfinite(n)) rep.finite = false;
            CheckEntry e;
            e.param = i < param_names.size() ? param_names[i] : "p" + std::to_string(i);
            e.index = k;
            e.analytic = a;
            e.numeric = n;
            e.abs_err = std::abs(a - n);
            rep.max_abs_err = std::max(rep.max_abs_err, e.abs_err);
            ++rep.compared;
            if (std::abs(n) <= kRelErrFloor) ++rep.below_floor;
            e.rel_err = e.abs_err / denom;
            if (e.rel_err > rep.max_rel_err) {
                rep.max_rel_err = e.rel_err;
                rep.worst.insert(rep.worst.begin(), e);
                if (rep.worst.size() > 5) rep.worst.resize(5);
            }
        }
    }
    rep.pass = rep.finite && rep.max_rel_err < tolerance;
    return rep;
}

// ---------------------------------------------------------------------------
// per-primitive sweep
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor<double> random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    auto t = Tensor<double>::zeros(s);
    for (long k = 0; k < t.size(); ++k) (*t.values)[k] = rng.uniform(lo, hi);
    return t;
}

// Keeps values away from the relu/step kink at 0.
inline void nudge_from_zero(Tensor<double>& t, double margin = 0.05) {
    for (long k = 0; k < t.size(); ++k) {
        double& v = (*t.values)[k];
        if (std::abs(v) < margin) v = v >= 0 ? v + 2 * margin : v - 2 * margin;
    }
}

// Separates values so 2x2 max-pool argmaxes cannot flip under perturbation.
inline void separate_values(Tensor<double>& t) {
    for (long k = 0; k < t.size(); ++k) (*t.values)[k] += double(k % 97) * 1e-3;
}

struct PrimitiveCase {
    std::string name;
    OpKind kind;
    Attrs attrs;
    std::vector<Tensor<double>> inputs;
    std::vector<int> diff_inputs;  // positions with a defined nonzero derivative
};

inline std::vector<PrimitiveCase> primitive_cases(std::uint64_t seed) {
    Rng rng(mix_seed(seed, "primitive-sweep"));
    std::vector<PrimitiveCase> cases;
    const Shape s4{2, 3, 4, 4};

    auto add_case = [&](std::string name, OpKind kind, Attrs at,
                        std::vector<Tensor<double>> inputs, std::vector<int> diff) {
        cases.push_back({std::move(name), kind, std::move(at), std::move(inputs), std::move(diff)});
    };

    add_case("add", OpKind::Add, {}, {random_tensor(s4, rng), random_tensor(s4, rng)}, {0, 1});
    add_case("mul", OpKind::Mul, {}, {random_tensor(s4, rng), random_tensor(s4, rng)}, {0, 1});
    {
        Attrs at;
        at.scalar = 0.7;
        add_case("add_scalar", OpKind::AddScalar, at, {random_tensor(s4, rng)}, {0});
        at.scalar = -1.3;
        add_case("mul_scalar", OpKind::MulScalar, at, {random_tensor(s4, rng)}, {0});
    }
    add_case("exp", OpKind::Exp, {}, {random_tensor(s4, rng)}, {0});
    {
        auto x = random_tensor(s4, rng);
        nudge_from_zero(x);
        add_case("relu", OpKind::Relu, {}, {x}, {0});
        auto x2 = random_tensor(s4, rng);
        nudge_from_zero(x2);
        add_case("step_mask", OpKind::StepMask, {}, {x2}, {});
    }
    add_case("sigmoid", OpKind::Sigmoid, {}, {random_tensor(s4, rng)}, {0});

    for (int stride : {1, 2}) {
        const std::string sfx = stride == 1 ? "" : "_s2";
        const Shape xs{2, 3, 6, 6};
        const Shape ws{4, 3, 3, 3};
        const int ho = kernels::conv_out_dim(6, stride);
        {
            Attrs at;
            at.stride = stride;
            add_case("conv2d" + sfx, OpKind::Conv2d, at,
                     {random_tensor(xs, rng), random_tensor(ws, rng)}, {0, 1});
        }
        {
            Attrs at;
            at.stride = stride;
            at.shape = xs;
            add_case("conv2d_input_grad" + sfx, OpKind::Conv2dInputGrad, at,
                     {random_tensor({2, 4, ho, ho}, rng), random_tensor(ws, rng)}, {0, 1});
        }
        {
            Attrs at;
            at.stride = stride;
            add_case("conv2d_weight_grad" + sfx, OpKind::Conv2dWeightGrad, at,
                     {random_tensor({2, 4, ho, ho}, rng), random_tensor(xs, rng)}, {0, 1});
        }
    }

    {
        auto x = random_tensor(s4, rng);
        separate_values(x);
        add_case("maxpool2x2", OpKind::MaxPool2x2, {}, {x}, {0});

        // build valid pool indices from a forward pass on a fresh input
        auto probe = random_tensor(s4, rng);
        separate_values(probe);
        auto pooled = Tensor<double>::zeros({2, 3, 2, 2});
        auto idx = std::make_shared<std::vector<std::int32_t>>(pooled.size());
        kernels::maxpool2x2(probe.data(), pooled.data(), idx->data(), 6, 4, 4);
        Attrs at;
        at.indices = idx;
        at.shape = s4;
        add_case("maxunpool2x2", OpKind::MaxUnpool2x2, at,
                 {random_tensor({2, 3, 2, 2}, rng)}, {0});
        add_case("pool_gather", OpKind::PoolGather, at, {random_tensor(s4, rng)}, {0});
    }

    add_case("upsample2x", OpKind::Upsample2x, {}, {random_tensor(s4, rng)}, {0});
    add_case("downsample2x_sum", OpKind::Downsample2xSum, {}, {random_tensor(s4, rng)}, {0});
    add_case("concat_channels", OpKind::ConcatC, {},
             {random_tensor({2, 2, 4, 4}, rng), random_tensor({2, 3, 4, 4}, rng)}, {0, 1});
    {
        Attrs at;
        at.begin = 1;
        at.count = 2;
        add_case("slice_channels", OpKind::SliceC, at, {random_tensor(s4, rng)}, {0});
        at.begin = 1;
        at.count = 5;
        add_case("pad_channels", OpKind::PadC, at, {random_tensor(s4, rng)}, {0});
    }
    add_case("log_softmax_channel", OpKind::LogSoftmaxC, {}, {random_tensor(s4, rng)}, {0});
    add_case("channel_sum", OpKind::ChannelSum, {}, {random_tensor(s4, rng)}, {0});
    {
        Attrs at;
        at.channels = 3;
        add_case("channel_broadcast", OpKind::ChannelBcast, at,
                 {random_tensor({2, 1, 4, 4}, rng)}, {0});
    }
    add_case("sum_all", OpKind::SumAll, {}, {random_tensor(s4, rng)}, {0});
    {
        Attrs at;
        at.shape = s4;
        add_case("scalar_broadcast", OpKind::ScalarBcast, at, {random_tensor({1}, rng)}, {0});
    }
    {
        auto idx = std::make_shared<std::vector<std::int32_t>>();
        for (int k = 0; k < 2 * 4 * 4; ++k) idx->push_back(rng.uniform_int(3));
        Attrs at;
        at.indices = idx;
        at.channels = 3;
        add_case("gather_channel", OpKind::GatherC, at, {random_tensor(s4, rng)}, {0});
        add_case("scatter_channel", OpKind::ScatterC, at,
                 {random_tensor({2, 1, 4, 4}, rng)}, {0});
    }
    add_case("add_bias", OpKind::AddBias, {}, {random_tensor(s4, rng), random_tensor({3}, rng)},
             {0, 1});
    add_case("bias_sum", OpKind::BiasSum, {}, {random_tensor(s4, rng)}, {0});
    {
        Attrs at;
        at.shape = s4;
        add_case("bias_broadcast", OpKind::BiasBcast, at, {random_tensor({3}, rng)}, {0});
    }
    {
        Attrs at;
        at.shape = Shape{2, 48};
        add_case("reshape", OpKind::Reshape, at, {random_tensor(s4, rng)}, {0});
    }
    return cases;
}

}  // namespace detail

// Scalar projection sum(out * r) of one primitive; analytic gradient of every
// differentiable input against central differences.
inline CheckReport check_primitive(const detail::PrimitiveCase& c, double h, double tolerance) {
    Rng rng(mix_seed(0x5eedu, c.name));
    Tensor<double> proj;
    {
        NoGradScope<double> guard;
        auto probe = ops::apply_primitive(c.kind, c.inputs, c.attrs);
        proj = detail::random_tensor(probe.shape, rng);
    }

    std::vector<int> diff = c.diff_inputs;
    if (diff.empty()) {
        // derivative defined as zero: analytic side contributes nothing
        diff.push_back(0);
    }

    // analytic
    std::vector<Tensor<double>> wrt;
    std::vector<std::string> names;
    std::vector<Tensor<double>> inputs = c.inputs;
    for (int pos : diff) {
        inputs[size_t(pos)].requires_grad = true;
        wrt.push_back(inputs[size_t(pos)]);
        names.push_back(c.name + ".in" + std::to_string(pos));
    }
    Tape<double> tape;
    std::vector<Tensor<double>> analytic;
    {
        GraphScope<double> scope(tape);
        auto out = ops::apply_primitive(c.kind, inputs, c.attrs);
        auto loss = ops::sum_all(ops::mul(out, proj));
        analytic = ops::grad(loss, wrt).grads;
    }

    // numeric: loss as a pure function of the checked inputs
    LossFn fn = [&](const std::vector<Tensor<double>>& p) {
        std::vector<Tensor<double>> in = c.inputs;
        for (size_t i = 0; i < diff.size(); ++i) in[size_t(diff[i])] = p[i];
        auto out = ops::apply_primitive(c.kind, in, c.attrs);
        double acc = 0;
        for (long k = 0; k < out.size(); ++k) acc += (*out.values)[k] * (*proj.values)[k];
        return acc;
    };
    auto numeric = finite_diff(fn, wrt, h);
    return compare_gradients(c.name, analytic, numeric, names, tolerance);
}

// Runs the sweep over every primitive. tolerance 1e-6 at h=1e-5, 64-bit.
inline std::vector<CheckReport> check_all_primitives(std::uint64_t seed, double h = 1e-5,
                                                     double tolerance = 1e-6) {
    std::vector<CheckReport> reports;
    for (const auto& c : detail::primitive_cases(seed)) reports.push_back(check_primitive(c, h, tolerance));
    return reports;
}

// ---------------------------------------------------------------------------
// meta-gradient check: d loss_t / d phi through the ephemeral inner step
// ---------------------------------------------------------------------------

struct TinyConfig {
    int image_size = 8;
    int num_classes = 2;
    std::vector<int> seg_widths = {2, 2, 2, 2, 2};
    std::vector<int> wnet_widths = {2, 2, 2};
    int split_at = 1;
    int wnet_out_channels = 1;
    double alpha = 0.05;
    double h = 1e-5;
    double tolerance = 1e-5;
};

namespace detail {

template <class Real>
data::Batch<Real> random_batch(int H, int W, int C, std::uint64_t seed, const char* domain) {
    Rng rng(mix_seed(seed, std::string("batch-") + domain));
    data::Batch<Real> b;
    b.image = Tensor<Real>::zeros({1, 3, H, W});
    for (long k = 0; k < b.image.size(); ++k) (*b.image.values)[k] = Real(rng.uniform());
    b.label = IntMap::zeros({1, H, W});
    for (auto& v : b.label.v) v = rng.uniform_int(C);
    b.domain = domain;
    return b;
}

struct TinyFixture {
    nn::SegNet<double> seg;
    nn::WeightNet<double> wnet;
    data::Batch<double> batch_s, batch_t;
};

inline TinyFixture make_tiny(const TinyConfig& tc, std::uint64_t seed) {
    TinyFixture f{
        nn::build_seg_net<double>(tc.num_classes, tc.split_at, tc.seg_widths,
                                  mix_seed(seed, "seg-init")),
        nn::build_weight_net<double>(tc.num_classes, tc.wnet_out_channels, tc.wnet_widths,
                                     mix_seed(seed, "wnet-init")),
        random_batch<double>(tc.image_size, tc.image_size, tc.num_classes, seed, "source"),
        random_batch<double>(tc.image_size, tc.image_size, tc.num_classes, seed, "target"),
    };
    // Perturb every phi parameter (including the zero-initialized head) so
    // the check exercises the full double-backprop path, not just the last
    // layer.
    Rng rng(mix_seed(seed, "phi-perturb"));
    for (auto& p : f.wnet.params)
        for (long k = 0; k < p.size(); ++k) (*p.values)[k] += rng.uniform(-0.3, 0.3);
    return f;
}

}  // namespace detail

// Engine's d loss_t / d phi on the tiny configuration against central finite
// differences over every phi parameter. loss_fn(phi) runs the exact meta
// forward path (weight map, weighted source loss, inner gradient step,
// target loss) without updating anything.
inline CheckReport check_meta_gradient(std::uint64_t seed, const TinyConfig& tc = {}) {
    auto fix = detail::make_tiny(tc, seed);

    std::vector<Tensor<double>> analytic;
    {
        Tape<double> tape;
        GraphScope<double> scope(tape);
        auto mf = meta::meta_forward(fix.seg, fix.wnet.params, fix.wnet, fix.batch_s, fix.batch_t,
                                     tc.alpha, /*second_order=*/true);
        analytic = ops::grad(mf.loss_t, fix.wnet.params).grads;
    }

    LossFn fn = [&](const std::vector<Tensor<double>>& phi) {
        Tape<double> tape;
        GraphScope<double> scope(tape);
        auto mf = meta::meta_forward(fix.seg, phi, fix.wnet, fix.batch_s, fix.batch_t, tc.alpha,
                                     /*second_order=*/false);
        return mf.loss_t.item();
    };
    auto numeric = finite_diff(fn, fix.wnet.params, tc.h);
    auto rep = compare_gradients("meta-gradient(seed=" + std::to_string(seed) + ")", analytic,
                                 numeric, fix.wnet.names, tc.tolerance);
    return rep;
}

}  // namespace metapix::gradcheck
