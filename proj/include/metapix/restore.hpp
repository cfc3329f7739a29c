#pragma once

// Rebuilding networks from a checkpoint plus the weight-separation statistic
// used to inspect what the weighting network learned.

#include "metapix/checkpoint.hpp"
#include "metapix/config.hpp"
#include "metapix/losses.hpp"
#include "metapix/nn.hpp"

namespace metapix::restore {

inline config::RunConfig config_from_checkpoint(const ckpt::Reader& reader) {
    require(reader.has("config"), "checkpoint carries no embedded config");
    return config::from_json(nlohmann::json::parse(reader.read_bytes("config")));
}

template <class Real>
nn::SegNet<Real> seg_from_checkpoint(const ckpt::Reader& reader, const config::RunConfig& cfg) {
    auto seg = nn::build_seg_net<Real>(cfg.data.num_classes, cfg.net.split_at, cfg.net.widths,
                                       mix_seed(cfg.seed, "seg-init"));
    for (size_t i = 0; i < seg.params.size(); ++i) {
        auto t = reader.read_tensor<Real>("seg." + seg.names[i]);
        require(t.shape == seg.params[i].shape, "checkpoint/seg shape mismatch at " + seg.names[i]);
        t.requires_grad = true;
        seg.params[i] = t;
    }
    return seg;
}

template <class Real>
nn::WeightNet<Real> wnet_from_checkpoint(const ckpt::Reader& reader, const config::RunConfig& cfg) {
    auto wnet = nn::build_weight_net<Real>(cfg.data.num_classes, cfg.net.wnet_out_channels,
                                           cfg.net.wnet_widths, mix_seed(cfg.seed, "wnet-init"));
    for (size_t i = 0; i < wnet.params.size(); ++i) {
        auto t = reader.read_tensor<Real>(wnet.names[i]);
        require(t.shape == wnet.params[i].shape,
                "checkpoint/wnet shape mismatch at " + wnet.names[i]);
        t.requires_grad = true;
        wnet.params[i] = t;
    }
    return wnet;
}

struct WeightStats {
    double corrupted_sum = 0, clean_sum = 0;
    long corrupted_n = 0, clean_n = 0;

    double corrupted_mean() const { return corrupted_n ? corrupted_sum / double(corrupted_n) : 0; }
    double clean_mean() const { return clean_n ? clean_sum / double(clean_n) : 0; }
};

// Mean learned weight over corrupted vs clean source pixels, measured with
// the generator's masks. Evaluation-only; training never reads the masks.
template <class Real>
WeightStats weight_separation(const nn::WeightNet<Real>& wnet, const data::Manifest& manifest) {
    NoGradScope<Real> no_grad;
    WeightStats stats;
    const auto items = manifest.split("source");
    for (size_t i = 0; i < items.size(); ++i) {
        auto batch = data::load_batch<Real>(manifest, "source", int(i));
        auto onehot = losses::one_hot<Real>(batch.label, manifest.spec.num_classes);
        auto w = wnet.forward(wnet.params, batch.image, onehot);
        IntMap mask = data::load_mask(manifest, *items[i]);
        const long hw = long(mask.shape[0]) * mask.shape[1];
        for (long k = 0; k < hw; ++k) {
            double wk;
            if (w.shape[1] == 1) {
                wk = double((*w.values)[k]);
            } else {
                const int id = batch.label.v[size_t(k)];
                wk = double((*w.values)[long(id) * hw + k]);
            }
            if (mask.v[size_t(k)] != 0) {
                stats.corrupted_sum += wk;
                ++stats.corrupted_n;
            } else {
                stats.clean_sum += wk;
                ++stats.clean_n;
            }
        }
    }
    return stats;
}

}  // namespace metapix::restore
