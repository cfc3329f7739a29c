#pragma once

// Differentiable primitives. Every backward rule is built from primitives in
// this same set, so a backward pass recorded with create_graph is itself
// differentiable — that is the mechanism the meta step relies on.

#include <algorithm>
#include <cmath>
#include <utility>

#include "metapix/kernels.hpp"
#include "metapix/tape.hpp"

namespace metapix::ops {

namespace detail {

template <class Real>
bool grad_linked(const Tensor<Real>& t, const Tape<Real>* tp) {
    if (t.requires_grad) return true;
    return tp && t.node >= 0 && t.tape_id == tp->id();
}

// Records the op when a tape is active and some input is grad-linked.
template <class Real>
Tensor<Real> record(OpKind kind, Attrs attrs, std::vector<Tensor<Real>> inputs, Tensor<Real> out) {
    Tape<Real>* tp = active_tape<Real>();
    bool linked = false;
    for (const auto& in : inputs) linked = linked || grad_linked(in, tp);
    if (!linked) return out;
    if (!tp) {
        if (recording_suspended<Real>()) return out;
        fail(std::string(op_name(kind)) + ": input requires grad but no graph is active");
    }
    Node<Real> n;
    n.kind = kind;
    n.attrs = std::move(attrs);
    n.input_ids.reserve(inputs.size());
    for (auto& in : inputs) {
        int id = -1;
        if (in.node >= 0 && in.tape_id == tp->id())
            id = in.node;
        else if (in.requires_grad)
            id = tp->leaf_id(in);
        n.input_ids.push_back(id);
    }
    n.inputs = std::move(inputs);
    n.out = out;
    int id = tp->add_node(std::move(n));
    out.node = id;
    out.tape_id = tp->id();
    out.requires_grad = true;
    return out;
}

template <class Real>
void check_same_shape(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
    require(a.shape == b.shape, std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
}

template <class Real>
void check_4d(const char* op, const Tensor<Real>& t) {
    require(t.shape.size() == 4, std::string(op) + ": expected 4-d tensor, got " + shape_str(t.shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> add(const Tensor<Real>& x, const Tensor<Real>& y) {
    detail::check_same_shape("add", x, y);
    auto out = Tensor<Real>::zeros(x.shape);
    const Real* a = x.data();
    const Real* b = y.data();
    Real* o = out.data();
    for (long k = 0; k < x.size(); ++k) o[k] = a[k] + b[k];
    return detail::record(OpKind::Add, {}, {x, y}, std::move(out));
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& x, const Tensor<Real>& y) {
    detail::check_same_shape("mul", x, y);
    auto out = Tensor<Real>::zeros(x.shape);
    const Real* a = x.data();
    const Real* b = y.data();
    Real* o = out.data();
    for (long k = 0; k < x.size(); ++k) o[k] = a[k] * b[k];
    return detail::record(OpKind::Mul, {}, {x, y}, std::move(out));
}

template <class Real>
Tensor<Real> add_scalar(const Tensor<Real>& x, double c) {
    auto out = Tensor<Real>::zeros(x.shape);
    const Real* a = x.data();
    Real* o = out.data();
    for (long k = 0; k < x.size(); ++k) o[k] = a[k] + Real(c);
    Attrs at;
    at.scalar = c;
    return detail::record(OpKind::AddScalar, std::move(at), {x}, std::move(out));
}

template <class Real>
Tensor<Real> mul_scalar(const Tensor<Real>& x, double c) {
    auto out = Tensor<Real>::zeros(x.shape);
    const Real* a = x.data();
    Real* o = out.data();
    for (long k = 0; k < x.size(); ++k) o[k] = a[k] * Real(c);
    Attrs at;
    at.scalar = c;
    return detail::record(OpKind::MulScalar, std::move(at), {x}, std::move(out));
}

template <class Real>
Tensor<Real> neg(const Tensor<Real>& x) {
    return mul_scalar(x, -1.0);
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& x, const Tensor<Real>& y) {
    return add(x, neg(y));
}

template <class Real>
Tensor<Real> exp(const Tensor<Real>& x) {
    auto out = Tensor<Real>::zeros(x.shape);
    const Real* a = x.data();
    Real* o = out.data();
    for (long k = 0; k < x.size(); ++k) o[k] = std::exp(a[k]);
    return detail::record(OpKind::Exp, {}, {x}, std::move(out));
}

template <class Real>
Tensor<Real> relu(const Tensor<Real>& x) {
    auto out = Tensor<Real>::zeros(x.shape);
    const Real* a = x.data();
    Real* o = out.data();
    for (long k = 0; k < x.size(); ++k) o[k] = a[k] > Real(0) ? a[k] : Real(0);
    return detail::record(OpKind::Relu, {}, {x}, std::move(out));
}

// 1 where x > 0, else 0. Derivative defined as zero everywhere.
template <class Real>
Tensor<Real> step_mask(const Tensor<Real>& x) {
    auto out = Tensor<Real>::zeros(x.shape);
    const Real* a = x.data();
    Real* o = out.data();
    for (long k = 0; k < x.size(); ++k) o[k] = a[k] > Real(0) ? Real(1) : Real(0);
    return detail::record(OpKind::StepMask, {}, {x}, std::move(out));
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& x) {
    auto out = Tensor<Real>::zeros(x.shape);
    const Real* a = x.data();
    Real* o = out.data();
    for (long k = 0; k < x.size(); ++k) o[k] = Real(1) / (Real(1) + std::exp(-a[k]));
    return detail::record(OpKind::Sigmoid, {}, {x}, std::move(out));
}

// ---------------------------------------------------------------------------
// convolution family (3x3, zero padding 1, stride 1 or 2)
// ---------------------------------------------------------------------------

namespace detail {

template <class Real>
void check_conv_args(const char* op, const Tensor<Real>& w, int stride) {
    require(w.shape.size() == 4 && w.shape[2] == 3 && w.shape[3] == 3,
            std::string(op) + ": weight must be [Co,Ci,3,3], got " + shape_str(w.shape));
    require(stride == 1 || stride == 2, std::string(op) + ": stride must be 1 or 2");
}

}  // namespace detail

template <class Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& w, int stride = 1) {
    detail::check_4d("conv2d", x);
    detail::check_conv_args("conv2d", w, stride);
    require(x.shape[1] == w.shape[1], "conv2d: input channels " + shape_str(x.shape) +
                                          " do not match weight " + shape_str(w.shape));
    const int B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3], Co = w.shape[0];
    const int Ho = kernels::conv_out_dim(H, stride), Wo = kernels::conv_out_dim(W, stride);
    auto out = Tensor<Real>::zeros({B, Co, Ho, Wo});
    kernels::conv2d_fwd(x.data(), w.data(), out.data(), B, Ci, H, W, Co, stride);
    Attrs at;
    at.stride = stride;
    return detail::record(OpKind::Conv2d, std::move(at), {x, w}, std::move(out));
}

// Gradient of conv2d w.r.t. its input: g is [B,Co,Ho,Wo], result has in_shape.
template <class Real>
Tensor<Real> conv2d_input_grad(const Tensor<Real>& g, const Tensor<Real>& w, const Shape& in_shape,
                               int stride = 1) {
    detail::check_4d("conv2d_input_grad", g);
    detail::check_conv_args("conv2d_input_grad", w, stride);
    require(in_shape.size() == 4, "conv2d_input_grad: bad target shape " + shape_str(in_shape));
    const int B = in_shape[0], Ci = in_shape[1], H = in_shape[2], W = in_shape[3];
    const int Co = w.shape[0];
    require(g.shape[0] == B && g.shape[1] == Co &&
                g.shape[2] == kernels::conv_out_dim(H, stride) &&
                g.shape[3] == kernels::conv_out_dim(W, stride) && w.shape[1] == Ci,
            "conv2d_input_grad: inconsistent shapes " + shape_str(g.shape) + " / " +
                shape_str(w.shape) + " -> " + shape_str(in_shape));
    auto out = Tensor<Real>::zeros(in_shape);
    kernels::conv2d_dx(g.data(), w.data(), out.data(), B, Ci, H, W, Co, stride);
    Attrs at;
    at.stride = stride;
    at.shape = in_shape;
    return detail::record(OpKind::Conv2dInputGrad, std::move(at), {g, w}, std::move(out));
}

// Gradient of conv2d w.r.t. its weight: result is [Co,Ci,3,3].
template <class Real>
Tensor<Real> conv2d_weight_grad(const Tensor<Real>& g, const Tensor<Real>& x, int stride = 1) {
    detail::check_4d("conv2d_weight_grad", g);
    detail::check_4d("conv2d_weight_grad", x);
    require(stride == 1 || stride == 2, "conv2d_weight_grad: stride must be 1 or 2");
    const int B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int Co = g.shape[1];
    require(g.shape[0] == B && g.shape[2] == kernels::conv_out_dim(H, stride) &&
                g.shape[3] == kernels::conv_out_dim(W, stride),
            "conv2d_weight_grad: inconsistent shapes " + shape_str(g.shape) + " / " +
                shape_str(x.shape));
    auto out = Tensor<Real>::zeros({Co, Ci, 3, 3});
    kernels::conv2d_dw(g.data(), x.data(), out.data(), B, Ci, H, W, Co, stride);
    Attrs at;
    at.stride = stride;
    return detail::record(OpKind::Conv2dWeightGrad, std::move(at), {g, x}, std::move(out));
}

// ---------------------------------------------------------------------------
// pooling / resampling
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> maxpool2x2(const Tensor<Real>& x) {
    detail::check_4d("maxpool2x2", x);
    const int H = x.shape[2], W = x.shape[3];
    require(H % 2 == 0 && W % 2 == 0, "maxpool2x2: H,W must be even, got " + shape_str(x.shape));
    const int planes = x.shape[0] * x.shape[1];
    auto out = Tensor<Real>::zeros({x.shape[0], x.shape[1], H / 2, W / 2});
    auto idx = std::make_shared<std::vector<std::int32_t>>(out.size());
    kernels::maxpool2x2(x.data(), out.data(), idx->data(), planes, H, W);
    Attrs at;
    at.indices = idx;
    at.shape = x.shape;
    return detail::record(OpKind::MaxPool2x2, std::move(at), {x}, std::move(out));
}

template <class Real>
Tensor<Real> maxunpool2x2(const Tensor<Real>& g,
                          std::shared_ptr<const std::vector<std::int32_t>> idx,
                          const Shape& in_shape) {
    detail::check_4d("maxunpool2x2", g);
    require(in_shape.size() == 4 && g.shape[2] == in_shape[2] / 2 && g.shape[3] == in_shape[3] / 2,
            "maxunpool2x2: shape mismatch " + shape_str(g.shape) + " -> " + shape_str(in_shape));
    require(idx && long(idx->size()) == g.size(), "maxunpool2x2: bad index array");
    auto out = Tensor<Real>::zeros(in_shape);
    kernels::maxunpool2x2(g.data(), idx->data(), out.data(), in_shape[0] * in_shape[1],
                          in_shape[2], in_shape[3]);
    Attrs at;
    at.indices = std::move(idx);
    at.shape = in_shape;
    return detail::record(OpKind::MaxUnpool2x2, std::move(at), {g}, std::move(out));
}

template <class Real>
Tensor<Real> pool_gather(const Tensor<Real>& t,
                         std::shared_ptr<const std::vector<std::int32_t>> idx) {
    detail::check_4d("pool_gather", t);
    const int H = t.shape[2], W = t.shape[3];
    auto out = Tensor<Real>::zeros({t.shape[0], t.shape[1], H / 2, W / 2});
    require(idx && long(idx->size()) == out.size(), "pool_gather: bad index array");
    kernels::pool_gather(t.data(), idx->data(), out.data(), t.shape[0] * t.shape[1], H, W);
    Attrs at;
    at.indices = std::move(idx);
    at.shape = t.shape;
    return detail::record(OpKind::PoolGather, std::move(at), {t}, std::move(out));
}

template <class Real>
Tensor<Real> upsample2x(const Tensor<Real>& x) {
    detail::check_4d("upsample2x", x);
    auto out = Tensor<Real>::zeros({x.shape[0], x.shape[1], x.shape[2] * 2, x.shape[3] * 2});
    kernels::upsample2x(x.data(), out.data(), x.shape[0] * x.shape[1], x.shape[2], x.shape[3]);
    return detail::record(OpKind::Upsample2x, {}, {x}, std::move(out));
}

template <class Real>
Tensor<Real> downsample2x_sum(const Tensor<Real>& x) {
    detail::check_4d("downsample2x_sum", x);
    require(x.shape[2] % 2 == 0 && x.shape[3] % 2 == 0,
            "downsample2x_sum: H,W must be even, got " + shape_str(x.shape));
    auto out = Tensor<Real>::zeros({x.shape[0], x.shape[1], x.shape[2] / 2, x.shape[3] / 2});
    kernels::downsample2x_sum(x.data(), out.data(), x.shape[0] * x.shape[1], x.shape[2],
                              x.shape[3]);
    return detail::record(OpKind::Downsample2xSum, {}, {x}, std::move(out));
}

// ---------------------------------------------------------------------------
// channel concat / slice / pad
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> concat_channels(const Tensor<Real>& a, const Tensor<Real>& b) {
    detail::check_4d("concat_channels", a);
    detail::check_4d("concat_channels", b);
    require(a.shape[0] == b.shape[0] && a.shape[2] == b.shape[2] && a.shape[3] == b.shape[3],
            "concat_channels: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const int B = a.shape[0], Ca = a.shape[1], Cb = b.shape[1];
    const long hw = long(a.shape[2]) * a.shape[3];
    auto out = Tensor<Real>::zeros({B, Ca + Cb, a.shape[2], a.shape[3]});
    for (int bi = 0; bi < B; ++bi) {
        std::copy_n(a.data() + long(bi) * Ca * hw, Ca * hw, out.data() + long(bi) * (Ca + Cb) * hw);
        std::copy_n(b.data() + long(bi) * Cb * hw, Cb * hw,
                    out.data() + long(bi) * (Ca + Cb) * hw + Ca * hw);
    }
    return detail::record(OpKind::ConcatC, {}, {a, b}, std::move(out));
}

template <class Real>
Tensor<Real> slice_channels(const Tensor<Real>& x, int begin, int count) {
    detail::check_4d("slice_channels", x);
    require(begin >= 0 && count > 0 && begin + count <= x.shape[1],
            "slice_channels: range [" + std::to_string(begin) + "," +
                std::to_string(begin + count) + ") out of " + shape_str(x.shape));
    const int B = x.shape[0], C = x.shape[1];
    const long hw = long(x.shape[2]) * x.shape[3];
    auto out = Tensor<Real>::zeros({B, count, x.shape[2], x.shape[3]});
    for (int bi = 0; bi < B; ++bi)
        std::copy_n(x.data() + (long(bi) * C + begin) * hw, long(count) * hw,
                    out.data() + long(bi) * count * hw);
    Attrs at;
    at.begin = begin;
    at.count = count;
    return detail::record(OpKind::SliceC, std::move(at), {x}, std::move(out));
}

// Embeds x into `total` channels of zeros starting at `begin`.
template <class Real>
Tensor<Real> pad_channels(const Tensor<Real>& x, int begin, int total) {
    detail::check_4d("pad_channels", x);
    require(begin >= 0 && begin + x.shape[1] <= total,
            "pad_channels: cannot place " + shape_str(x.shape) + " at " + std::to_string(begin) +
                " of " + std::to_string(total));
    const int B = x.shape[0], C = x.shape[1];
    const long hw = long(x.shape[2]) * x.shape[3];
    auto out = Tensor<Real>::zeros({B, total, x.shape[2], x.shape[3]});
    for (int bi = 0; bi < B; ++bi)
        std::copy_n(x.data() + long(bi) * C * hw, long(C) * hw,
                    out.data() + (long(bi) * total + begin) * hw);
    Attrs at;
    at.begin = begin;
    at.count = total;
    return detail::record(OpKind::PadC, std::move(at), {x}, std::move(out));
}

// ---------------------------------------------------------------------------
// reductions / broadcasts / softmax
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> log_softmax_channel(const Tensor<Real>& x) {
    detail::check_4d("log_softmax_channel", x);
    auto out = Tensor<Real>::zeros(x.shape);
    kernels::logsoftmax_channel(x.data(), out.data(), x.shape[0], x.shape[1],
                                long(x.shape[2]) * x.shape[3]);
    return detail::record(OpKind::LogSoftmaxC, {}, {x}, std::move(out));
}

template <class Real>
Tensor<Real> channel_sum(const Tensor<Real>& x) {
    detail::check_4d("channel_sum", x);
    auto out = Tensor<Real>::zeros({x.shape[0], 1, x.shape[2], x.shape[3]});
    kernels::channel_sum(x.data(), out.data(), x.shape[0], x.shape[1],
                         long(x.shape[2]) * x.shape[3]);
    return detail::record(OpKind::ChannelSum, {}, {x}, std::move(out));
}

template <class Real>
Tensor<Real> channel_broadcast(const Tensor<Real>& x, int channels) {
    detail::check_4d("channel_broadcast", x);
    require(x.shape[1] == 1, "channel_broadcast: expected single channel, got " + shape_str(x.shape));
    auto out = Tensor<Real>::zeros({x.shape[0], channels, x.shape[2], x.shape[3]});
    kernels::channel_broadcast(x.data(), out.data(), x.shape[0], channels,
                               long(x.shape[2]) * x.shape[3]);
    Attrs at;
    at.channels = channels;
    return detail::record(OpKind::ChannelBcast, std::move(at), {x}, std::move(out));
}

template <class Real>
Tensor<Real> sum_all(const Tensor<Real>& x) {
    auto out = Tensor<Real>::zeros({1});
    Real acc = Real(0);
    const Real* a = x.data();
    for (long k = 0; k < x.size(); ++k) acc += a[k];
    (*out.values)[0] = acc;
    Attrs at;
    at.shape = x.shape;
    return detail::record(OpKind::SumAll, std::move(at), {x}, std::move(out));
}

template <class Real>
Tensor<Real> mean_all(const Tensor<Real>& x) {
    return mul_scalar(sum_all(x), 1.0 / double(x.size()));
}

template <class Real>
Tensor<Real> scalar_broadcast(const Tensor<Real>& s, const Shape& shape) {
    require(s.size() == 1, "scalar_broadcast: expected scalar, got " + shape_str(s.shape));
    auto out = Tensor<Real>::full(shape, (*s.values)[0]);
    Attrs at;
    at.shape = shape;
    return detail::record(OpKind::ScalarBcast, std::move(at), {s}, std::move(out));
}

// Picks x[b, idx[b,h,w], h, w] -> [B,1,H,W]. Indices are a fixed attribute.
template <class Real>
Tensor<Real> gather_channel(const Tensor<Real>& x,
                            std::shared_ptr<const std::vector<std::int32_t>> idx) {
    detail::check_4d("gather_channel", x);
    const long hw = long(x.shape[2]) * x.shape[3];
    require(idx && long(idx->size()) == x.shape[0] * hw, "gather_channel: bad index array");
    for (std::int32_t i : *idx)
        require(i >= 0 && i < x.shape[1], "gather_channel: index " + std::to_string(i) +
                                              " out of range for " + shape_str(x.shape));
    auto out = Tensor<Real>::zeros({x.shape[0], 1, x.shape[2], x.shape[3]});
    kernels::gather_channel(x.data(), idx->data(), out.data(), x.shape[0], x.shape[1], hw);
    Attrs at;
    at.indices = std::move(idx);
    at.channels = x.shape[1];
    return detail::record(OpKind::GatherC, std::move(at), {x}, std::move(out));
}

template <class Real>
Tensor<Real> scatter_channel(const Tensor<Real>& x,
                             std::shared_ptr<const std::vector<std::int32_t>> idx, int channels) {
    detail::check_4d("scatter_channel", x);
    require(x.shape[1] == 1, "scatter_channel: expected single channel, got " + shape_str(x.shape));
    const long hw = long(x.shape[2]) * x.shape[3];
    require(idx && long(idx->size()) == x.shape[0] * hw, "scatter_channel: bad index array");
    auto out = Tensor<Real>::zeros({x.shape[0], channels, x.shape[2], x.shape[3]});
    kernels::scatter_channel(x.data(), idx->data(), out.data(), x.shape[0], channels, hw);
    Attrs at;
    at.indices = std::move(idx);
    at.channels = channels;
    return detail::record(OpKind::ScatterC, std::move(at), {x}, std::move(out));
}

template <class Real>
Tensor<Real> add_bias(const Tensor<Real>& x, const Tensor<Real>& b) {
    detail::check_4d("add_bias", x);
    require(b.shape.size() == 1 && b.shape[0] == x.shape[1],
            "add_bias: bias " + shape_str(b.shape) + " does not match " + shape_str(x.shape));
    auto out = Tensor<Real>::zeros(x.shape);
    kernels::add_bias(x.data(), b.data(), out.data(), x.shape[0], x.shape[1],
                      long(x.shape[2]) * x.shape[3]);
    return detail::record(OpKind::AddBias, {}, {x, b}, std::move(out));
}

template <class Real>
Tensor<Real> bias_sum(const Tensor<Real>& x) {
    detail::check_4d("bias_sum", x);
    auto out = Tensor<Real>::zeros({x.shape[1]});
    kernels::bias_sum(x.data(), out.data(), x.shape[0], x.shape[1],
                      long(x.shape[2]) * x.shape[3]);
    Attrs at;
    at.shape = x.shape;
    return detail::record(OpKind::BiasSum, std::move(at), {x}, std::move(out));
}

template <class Real>
Tensor<Real> bias_broadcast(const Tensor<Real>& b, const Shape& shape) {
    require(shape.size() == 4 && b.shape.size() == 1 && b.shape[0] == shape[1],
            "bias_broadcast: " + shape_str(b.shape) + " -> " + shape_str(shape));
    auto out = Tensor<Real>::zeros(shape);
    const long hw = long(shape[2]) * shape[3];
    for (int bi = 0; bi < shape[0]; ++bi)
        for (int c = 0; c < shape[1]; ++c)
            std::fill_n(out.data() + (long(bi) * shape[1] + c) * hw, hw, (*b.values)[c]);
    Attrs at;
    at.shape = shape;
    return detail::record(OpKind::BiasBcast, std::move(at), {b}, std::move(out));
}

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& x, const Shape& shape) {
    require(numel(shape) == x.size(),
            "reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(shape));
    auto out = Tensor<Real>(shape, std::make_shared<std::vector<Real>>(*x.values));
    Attrs at;
    at.shape = shape;
    return detail::record(OpKind::Reshape, std::move(at), {x}, std::move(out));
}

// ---------------------------------------------------------------------------
// backward rules
// ---------------------------------------------------------------------------

namespace detail {

// Per-input gradient contributions of one node, expressed via the ops above.
// Entries pair the input position with its contribution; inputs with defined-
// zero derivative (StepMask) or constant attributes contribute nothing.
template <class Real>
std::vector<std::pair<int, Tensor<Real>>> vjp(const Node<Real>& n, const Tensor<Real>& g) {
    using P = std::pair<int, Tensor<Real>>;
    switch (n.kind) {
        case OpKind::Leaf:
            return {};
        case OpKind::Add:
            return {P{0, g}, P{1, g}};
        case OpKind::Mul:
            return {P{0, mul(g, n.inputs[1])}, P{1, mul(g, n.inputs[0])}};
        case OpKind::AddScalar:
            return {P{0, g}};
        case OpKind::MulScalar:
            return {P{0, mul_scalar(g, n.attrs.scalar)}};
        case OpKind::Exp:
            return {P{0, mul(g, n.out)}};
        case OpKind::Relu:
            return {P{0, mul(g, step_mask(n.inputs[0]))}};
        case OpKind::StepMask:
            return {};
        case OpKind::Sigmoid: {
            auto one_minus = add_scalar(mul_scalar(n.out, -1.0), 1.0);
            return {P{0, mul(g, mul(n.out, one_minus))}};
        }
        case OpKind::Conv2d:
            return {P{0, conv2d_input_grad(g, n.inputs[1], n.inputs[0].shape, n.attrs.stride)},
                    P{1, conv2d_weight_grad(g, n.inputs[0], n.attrs.stride)}};
        case OpKind::Conv2dInputGrad:
            // out = input_grad(g0, w); d/dg0 = conv2d(t, w), d/dw = weight_grad(g0, t)
            return {P{0, conv2d(g, n.inputs[1], n.attrs.stride)},
                    P{1, conv2d_weight_grad(n.inputs[0], g, n.attrs.stride)}};
        case OpKind::Conv2dWeightGrad:
            // out = weight_grad(g0, x); d/dg0 = conv2d(x, v), d/dx = input_grad(g0, v)
            return {P{0, conv2d(n.inputs[1], g, n.attrs.stride)},
                    P{1, conv2d_input_grad(n.inputs[0], g, n.inputs[1].shape, n.attrs.stride)}};
        case OpKind::MaxPool2x2:
            return {P{0, maxunpool2x2(g, n.attrs.indices, n.attrs.shape)}};
        case OpKind::MaxUnpool2x2:
            return {P{0, pool_gather(g, n.attrs.indices)}};
        case OpKind::PoolGather:
            return {P{0, maxunpool2x2(g, n.attrs.indices, n.attrs.shape)}};
        case OpKind::Upsample2x:
            return {P{0, downsample2x_sum(g)}};
        case OpKind::Downsample2xSum:
            return {P{0, upsample2x(g)}};
        case OpKind::ConcatC:
            return {P{0, slice_channels(g, 0, n.inputs[0].shape[1])},
                    P{1, slice_channels(g, n.inputs[0].shape[1], n.inputs[1].shape[1])}};
        case OpKind::SliceC:
            return {P{0, pad_channels(g, n.attrs.begin, n.inputs[0].shape[1])}};
        case OpKind::PadC:
            return {P{0, slice_channels(g, n.attrs.begin, n.inputs[0].shape[1])}};
        case OpKind::LogSoftmaxC: {
            // dx = g - softmax(x) * channel_broadcast(channel_sum(g))
            auto smax = exp(n.out);
            auto gsum = channel_broadcast(channel_sum(g), n.out.shape[1]);
            return {P{0, sub(g, mul(smax, gsum))}};
        }
        case OpKind::ChannelSum:
            return {P{0, channel_broadcast(g, n.inputs[0].shape[1])}};
        case OpKind::ChannelBcast:
            return {P{0, channel_sum(g)}};
        case OpKind::SumAll:
            return {P{0, scalar_broadcast(g, n.inputs[0].shape)}};
        case OpKind::ScalarBcast:
            return {P{0, sum_all(g)}};
        case OpKind::GatherC:
            return {P{0, scatter_channel(g, n.attrs.indices, n.attrs.channels)}};
        case OpKind::ScatterC:
            return {P{0, gather_channel(g, n.attrs.indices)}};
        case OpKind::AddBias:
            return {P{0, g}, P{1, bias_sum(g)}};
        case OpKind::BiasSum:
            return {P{0, bias_broadcast(g, n.attrs.shape)}};
        case OpKind::BiasBcast:
            return {P{0, bias_sum(g)}};
        case OpKind::Reshape:
            return {P{0, reshape(g, n.inputs[0].shape)}};
    }
    fail("vjp: unhandled op");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// grad
// ---------------------------------------------------------------------------

struct GradOptions {
    bool retain = true;
    bool create_graph = false;
};

template <class Real>
struct GradResult {
    std::vector<Tensor<Real>> grads;
    std::vector<bool> reached;  // false: wrt not on the graph, zero grad returned

    bool all_reached() const {
        for (bool r : reached)
            if (!r) return false;
        return true;
    }
};

// Reverse sweep from a scalar output over the active tape. With create_graph
// the returned gradients are graph-linked and differentiable again; with
// retain=false the tape is consumed and cannot be traversed a second time.
template <class Real>
GradResult<Real> grad(const Tensor<Real>& output, const std::vector<Tensor<Real>>& wrt,
                      GradOptions opt = {}) {
    Tape<Real>* tp = active_tape<Real>();
    require(tp != nullptr, "grad: no active graph");
    require(tp->alive(), "grad: graph was already consumed");
    require(output.size() == 1, "grad: output must be scalar, got " + shape_str(output.shape));
    require(output.node >= 0 && output.tape_id == tp->id(),
            "grad: output is not part of the active graph");

    const int out_id = output.node;
    std::vector<Tensor<Real>> gmap(out_id + 1);
    std::vector<bool> has(out_id + 1, false);
    gmap[out_id] = Tensor<Real>::full({1}, Real(1));
    has[out_id] = true;

    auto sweep = [&] {
        for (int id = out_id; id >= 0; --id) {
            if (!has[id]) continue;
            if (tp->node(id).kind == OpKind::Leaf) continue;
            // Copy: vjp may append nodes and invalidate references.
            Node<Real> n = tp->node(id);
            auto contribs = detail::vjp(n, gmap[id]);
            for (auto& [pos, c] : contribs) {
                const int target = n.input_ids[pos];
                if (target < 0) continue;
                if (has[target])
                    gmap[target] = add(gmap[target], c);
                else {
                    gmap[target] = std::move(c);
                    has[target] = true;
                }
            }
        }
    };

    if (opt.create_graph) {
        sweep();
    } else {
        NoGradScope<Real> guard;
        sweep();
    }

    GradResult<Real> result;
    result.grads.reserve(wrt.size());
    result.reached.reserve(wrt.size());
    for (const auto& t : wrt) {
        const int id = tp->find(t);
        if (id >= 0 && id <= out_id && has[id]) {
            result.grads.push_back(gmap[id]);
            result.reached.push_back(true);
        } else {
            result.grads.push_back(Tensor<Real>::zeros(t.shape));
            result.reached.push_back(false);
        }
    }
    if (!opt.retain && !opt.create_graph) tp->consume();
    return result;
}

// One differentiable gradient-descent step: theta_i - alpha * g_i. The
// returned tensors stay linked to whatever g depends on.
template <class Real>
std::vector<Tensor<Real>> differentiable_step(const std::vector<Tensor<Real>>& theta,
                                              const std::vector<Tensor<Real>>& g, double alpha) {
    require(theta.size() == g.size(), "differentiable_step: got " + std::to_string(theta.size()) +
                                          " parameters but " + std::to_string(g.size()) +
                                          " gradients");
    std::vector<Tensor<Real>> out;
    out.reserve(theta.size());
    for (size_t i = 0; i < theta.size(); ++i) {
        detail::check_same_shape("differentiable_step", theta[i], g[i]);
        out.push_back(add(theta[i], mul_scalar(g[i], -alpha)));
    }
    return out;
}

// Generic dispatcher over the primitive set; used by the gradient checker to
// enumerate every primitive uniformly.
template <class Real>
Tensor<Real> apply_primitive(OpKind kind, const std::vector<Tensor<Real>>& in, const Attrs& at) {
    switch (kind) {
        case OpKind::Add: return add(in[0], in[1]);
        case OpKind::Mul: return mul(in[0], in[1]);
        case OpKind::AddScalar: return add_scalar(in[0], at.scalar);
        case OpKind::MulScalar: return mul_scalar(in[0], at.scalar);
        case OpKind::Exp: return exp(in[0]);
        case OpKind::Relu: return relu(in[0]);
        case OpKind::StepMask: return step_mask(in[0]);
        case OpKind::Sigmoid: return sigmoid(in[0]);
        case OpKind::Conv2d: return conv2d(in[0], in[1], at.stride);
        case OpKind::Conv2dInputGrad: return conv2d_input_grad(in[0], in[1], at.shape, at.stride);
        case OpKind::Conv2dWeightGrad: return conv2d_weight_grad(in[0], in[1], at.stride);
        case OpKind::MaxPool2x2: return maxpool2x2(in[0]);
        case OpKind::MaxUnpool2x2: return maxunpool2x2(in[0], at.indices, at.shape);
        case OpKind::PoolGather: return pool_gather(in[0], at.indices);
        case OpKind::Upsample2x: return upsample2x(in[0]);
        case OpKind::Downsample2xSum: return downsample2x_sum(in[0]);
        case OpKind::ConcatC: return concat_channels(in[0], in[1]);
        case OpKind::SliceC: return slice_channels(in[0], at.begin, at.count);
        case OpKind::PadC: return pad_channels(in[0], at.begin, at.count);
        case OpKind::LogSoftmaxC: return log_softmax_channel(in[0]);
        case OpKind::ChannelSum: return channel_sum(in[0]);
        case OpKind::ChannelBcast: return channel_broadcast(in[0], at.channels);
        case OpKind::SumAll: return sum_all(in[0]);
        case OpKind::ScalarBcast: return scalar_broadcast(in[0], at.shape);
        case OpKind::GatherC: return gather_channel(in[0], at.indices);
        case OpKind::ScatterC: return scatter_channel(in[0], at.indices, at.channels);
        case OpKind::AddBias: return add_bias(in[0], in[1]);
        case OpKind::BiasSum: return bias_sum(in[0]);
        case OpKind::BiasBcast: return bias_broadcast(in[0], at.shape);
        case OpKind::Reshape: return reshape(in[0], at.shape);
        case OpKind::Leaf: break;
    }
    fail("apply_primitive: unhandled op");
}

}  // namespace metapix::ops
