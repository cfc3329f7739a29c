#include <doctest.h>

#include <filesystem>

#include "metapix/gradcheck.hpp"
#include "metapix/meta.hpp"

using namespace metapix;
namespace fs = std::filesystem;

namespace {

template <class Real>
std::vector<Tensor<Real>> snapshot(const std::vector<Tensor<Real>>& params) {
    std::vector<Tensor<Real>> out;
    for (const auto& p : params) out.push_back(p.clone());
    return out;
}

template <class Real>
bool all_bitwise_equal(const std::vector<Tensor<Real>>& a, const std::vector<Tensor<Real>>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (*a[i].values != *b[i].values) return false;
    return true;
}

struct Fixture {
    nn::SegNet<float> seg;
    nn::WeightNet<float> wnet;
    data::Batch<float> batch_s, batch_t;

    explicit Fixture(std::uint64_t seed, int C = 3, int S = 16)
        : seg(nn::build_seg_net<float>(C, 1, {2, 2, 2, 2, 2}, mix_seed(seed, "seg"))),
          wnet(nn::build_weight_net<float>(C, 1, {2, 2, 2}, mix_seed(seed, "wnet"))),
          batch_s(gradcheck::detail::random_batch<float>(S, S, C, mix_seed(seed, "s"), "source")),
          batch_t(gradcheck::detail::random_batch<float>(S, S, C, mix_seed(seed, "t"), "target")) {
        // nontrivial weight head
        Rng rng(mix_seed(seed, "head"));
        auto& hw = wnet.params[size_t(wnet.head.w)];
        for (long k = 0; k < hw.size(); ++k) (*hw.values)[k] = float(rng.uniform(-0.5, 0.5));
    }
};

}  // namespace

TEST_CASE("pretrain_step: identical batches at split 0 give Loss = 2 * Loss_t") {
    Fixture f(1);
    auto seg0 = nn::build_seg_net<float>(3, 0, {2, 2, 2, 2, 2}, 5);
    nn::OptimConfig cfg;
    auto opt = nn::make_adam(seg0.params, cfg);
    auto rec = meta::pretrain_step<float>(seg0, opt, &f.batch_s, f.batch_s, false);
    CHECK(rec.loss_s == rec.loss_t);  // same batch, fully shared net
    CHECK_FALSE(rec.skipped);
}

TEST_CASE("pretrain loss decreases over 200 steps on a fixed batch pair") {
    Fixture f(2);
    nn::OptimConfig cfg;
    cfg.lr = 1e-3;
    auto opt = nn::make_adam(f.seg.params, cfg);
    double first = 0, last = 0;
    for (int i = 0; i < 200; ++i) {
        auto rec = meta::pretrain_step<float>(f.seg, opt, &f.batch_s, f.batch_t, false);
        const double joint = rec.loss_s + rec.loss_t;
        if (i == 0) first = joint;
        last = joint;
    }
    INFO("first ", first, " last ", last);
    CHECK(last < first);
}

TEST_CASE("meta_step: theta restored bitwise, only phi and meta state change") {
    Fixture f(3);
    nn::OptimConfig mcfg;
    mcfg.lr = 1e-3;
    auto meta_opt = nn::make_adam(f.wnet.params, mcfg);

    auto seg_before = snapshot(f.seg.params);
    auto phi_before = snapshot(f.wnet.params);
    auto rec = meta::meta_step<float>(f.seg, f.wnet, meta_opt, f.batch_s, f.batch_t, 1e-2);
    CHECK_FALSE(rec.skipped);

    CHECK(all_bitwise_equal(f.seg.params, seg_before));    // theta untouched
    CHECK_FALSE(all_bitwise_equal(f.wnet.params, phi_before));  // phi moved
    CHECK(meta_opt.t == 1);
    CHECK(rec.w_mean > 0.0);
    CHECK(rec.w_min > 0.0);
    CHECK(rec.w_max < 1.0);
}

TEST_CASE("meta_step with alpha=0 leaves phi bitwise unchanged") {
    Fixture f(4);
    nn::OptimConfig mcfg;
    auto meta_opt = nn::make_adam(f.wnet.params, mcfg);
    auto phi_before = snapshot(f.wnet.params);
    auto rec = meta::meta_step<float>(f.seg, f.wnet, meta_opt, f.batch_s, f.batch_t, 0.0);
    CHECK_FALSE(rec.skipped);
    CHECK(all_bitwise_equal(f.wnet.params, phi_before));
}

TEST_CASE("weighted_train_step: W=1 forced is bitwise identical to pretrain_step") {
    Fixture f(5);
    nn::OptimConfig cfg;
    cfg.lr = 1e-3;

    auto seg_a = f.seg;
    for (auto& p : seg_a.params) p = p.clone();
    auto opt_a = nn::make_adam(seg_a.params, cfg);
    auto ones = Tensor<float>::full({1, 1, 16, 16}, 1.0f);
    auto rec_a = meta::weighted_train_step<float>(seg_a, f.wnet, opt_a, f.batch_s, f.batch_t, &ones);

    auto seg_b = f.seg;
    for (auto& p : seg_b.params) p = p.clone();
    auto opt_b = nn::make_adam(seg_b.params, cfg);
    auto rec_b = meta::pretrain_step<float>(seg_b, opt_b, &f.batch_s, f.batch_t, false);

    CHECK(rec_a.loss_s == rec_b.loss_s);
    CHECK(rec_a.loss_t == rec_b.loss_t);
    CHECK(all_bitwise_equal(seg_a.params, seg_b.params));
}

TEST_CASE("weighted_train_step: W=0 forced trains on the target loss only") {
    Fixture f(6);
    nn::OptimConfig cfg;
    cfg.lr = 1e-3;
    auto opt = nn::make_adam(f.seg.params, cfg);
    auto before = snapshot(f.seg.params);
    auto phi_before = snapshot(f.wnet.params);
    auto meta_m_before = Tensor<float>::zeros({1});

    auto zeros = Tensor<float>::zeros({1, 1, 16, 16});
    auto rec = meta::weighted_train_step<float>(f.seg, f.wnet, opt, f.batch_s, f.batch_t, &zeros);
    CHECK_FALSE(rec.skipped);
    CHECK(rec.loss_s == 0.0);

    // source-head parameters receive exactly zero gradient on the first step
    for (int id : f.seg.head_param_ids(nn::Domain::Source))
        CHECK(*f.seg.params[size_t(id)].values == *before[size_t(id)].values);
    // target path trained
    bool tgt_changed = false;
    for (int id : f.seg.head_param_ids(nn::Domain::Target))
        tgt_changed = tgt_changed || *f.seg.params[size_t(id)].values != *before[size_t(id)].values;
    CHECK(tgt_changed);
    // phi untouched by construction
    CHECK(all_bitwise_equal(f.wnet.params, phi_before));
    (void)meta_m_before;
}

TEST_CASE("update locality over interleaved steps") {
    Fixture f(7);
    nn::OptimConfig cfg;
    cfg.lr = 1e-3;
    auto seg_opt = nn::make_adam(f.seg.params, cfg);
    auto meta_opt = nn::make_adam(f.wnet.params, cfg);

    for (int i = 0; i < 3; ++i) {
        // meta step: phi + meta state only
        auto seg_before = snapshot(f.seg.params);
        auto seg_m_before = snapshot(seg_opt.m);
        const long seg_t_before = seg_opt.t;
        meta::meta_step<float>(f.seg, f.wnet, meta_opt, f.batch_s, f.batch_t, 1e-2);
        CHECK(all_bitwise_equal(f.seg.params, seg_before));
        CHECK(all_bitwise_equal(seg_opt.m, seg_m_before));
        CHECK(seg_opt.t == seg_t_before);

        // weighted step: theta + seg state only
        auto phi_before = snapshot(f.wnet.params);
        auto meta_m_before = snapshot(meta_opt.m);
        const long meta_t_before = meta_opt.t;
        meta::weighted_train_step<float>(f.seg, f.wnet, seg_opt, f.batch_s, f.batch_t);
        CHECK(all_bitwise_equal(f.wnet.params, phi_before));
        CHECK(all_bitwise_equal(meta_opt.m, meta_m_before));
        CHECK(meta_opt.t == meta_t_before);
    }
}

TEST_CASE("schedule validation") {
    meta::Schedule s;
    s.G = 0;
    s.N2 = 10;
    CHECK_THROWS(s.validate());
    s.N2 = 0;
    s.N3 = 0;
    CHECK_NOTHROW(s.validate());
    CHECK(meta::Schedule{}.total_seg_steps() == 3000 + 3 * 900);
}
