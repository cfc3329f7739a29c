#pragma once

// Per-pixel cross entropy in unweighted and pixel-weighted forms. The weighted
// sum is always divided by B*H*W — never renormalized by the weight mass —
// so the global scale of the weight map stays visible to the meta-learner.

#include <optional>

#include "metapix/ops.hpp"

namespace metapix::losses {

inline constexpr int kIgnoreId = 255;

template <class Real>
struct LossValue {
    Tensor<Real> value;      // scalar, graph-linked
    long valid_pixels = 0;   // non-ignored pixels
};

template <class Real>
Tensor<Real> one_hot(const IntMap& label, int num_classes, int ignore_id = kIgnoreId) {
    require(label.shape.size() == 3, "one_hot: expected [B,H,W] labels, got " + shape_str(label.shape));
    const int B = label.shape[0], H = label.shape[1], W = label.shape[2];
    auto out = Tensor<Real>::zeros({B, num_classes, H, W});
    const long hw = long(H) * W;
    for (int b = 0; b < B; ++b)
        for (long k = 0; k < hw; ++k) {
            const int id = label.v[size_t(b * hw + k)];
            if (id == ignore_id) continue;  // all-zero across channels
            require(id >= 0 && id < num_classes,
                    "one_hot: class id " + std::to_string(id) + " out of range at pixel (b=" +
                        std::to_string(b) + ",h=" + std::to_string(k / W) + ",w=" +
                        std::to_string(k % W) + ")");
            (*out.values)[(long(b) * num_classes + id) * hw + k] = Real(1);
        }
    return out;
}

namespace detail {

// Mean cross entropy over B*H*W pixels, optionally scaled per pixel by a
// weight map with 1 or C channels (C selects the ground-truth channel's
// weight). Ignored pixels contribute zero and are excluded from the count.
template <class Real>
LossValue<Real> pixel_ce_impl(const Tensor<Real>& logits, const IntMap& label,
                              const Tensor<Real>* weights, int ignore_id) {
    require(logits.shape.size() == 4, "pixel_ce: expected [B,C,H,W] logits, got " + shape_str(logits.shape));
    const int B = logits.shape[0], C = logits.shape[1], H = logits.shape[2], W = logits.shape[3];
    require(label.shape == Shape{B, H, W}, "pixel_ce: label shape " + shape_str(label.shape) +
                                               " does not match logits " + shape_str(logits.shape));
    if (weights) {
        const auto& ws = weights->shape;
        require(ws.size() == 4 && ws[0] == B && ws[2] == H && ws[3] == W &&
                    (ws[1] == 1 || ws[1] == C),
                "pixel_ce: weight shape " + shape_str(ws) + " must be [B,1|C,H,W] matching " +
                    shape_str(logits.shape));
    }

    const long hw = long(H) * W;
    auto idx = std::make_shared<std::vector<std::int32_t>>(size_t(B) * hw);
    auto mask = Tensor<Real>::zeros({B, 1, H, W});
    long valid = 0;
    for (long k = 0; k < long(B) * hw; ++k) {
        const int id = label.v[size_t(k)];
        if (id == ignore_id) {
            (*idx)[size_t(k)] = 0;
            continue;
        }
        require(id >= 0 && id < C, "pixel_ce: class id " + std::to_string(id) +
                                       " out of range [0," + std::to_string(C) + ")");
        (*idx)[size_t(k)] = id;
        (*mask.values)[k] = Real(1);
        ++valid;
    }
    require(valid > 0, "pixel_ce: empty loss (all pixels ignored)");

    auto logp = ops::log_softmax_channel(logits);
    auto ce = ops::mul(ops::neg(ops::gather_channel(logp, idx)), mask);  // [B,1,H,W]
    if (weights) {
        auto w = weights->shape[1] == 1 ? *weights : ops::gather_channel(*weights, idx);
        ce = ops::mul(ce, w);
    }
    LossValue<Real> out;
    out.value = ops::mul_scalar(ops::sum_all(ce), 1.0 / (double(B) * hw));
    out.valid_pixels = valid;
    return out;
}

}  // namespace detail

template <class Real>
LossValue<Real> pixel_ce(const Tensor<Real>& logits, const IntMap& label,
                         int ignore_id = kIgnoreId) {
    return detail::pixel_ce_impl<Real>(logits, label, nullptr, ignore_id);
}

template <class Real>
LossValue<Real> pixel_ce(const Tensor<Real>& logits, const IntMap& label,
                         const Tensor<Real>& weights, int ignore_id = kIgnoreId) {
    return detail::pixel_ce_impl<Real>(logits, label, &weights, ignore_id);
}

template <class Real>
LossValue<Real> joint_loss(const LossValue<Real>& loss_s, const LossValue<Real>& loss_t) {
    require(std::isfinite(double(loss_s.value.item())) && std::isfinite(double(loss_t.value.item())),
            "joint_loss: non-finite input loss");
    LossValue<Real> out;
    out.value = ops::add(loss_s.value, loss_t.value);
    out.valid_pixels = loss_s.valid_pixels + loss_t.valid_pixels;
    return out;
}

}  // namespace metapix::losses
