#include <doctest.h>

#include "metapix/gradcheck.hpp"

using namespace metapix;

// The correctness anchor: the engine's d loss_t / d phi through the inner
// gradient step against central finite differences over every phi parameter.

TEST_CASE("meta-gradient matches finite differences on the tiny configuration") {
    auto rep = gradcheck::check_meta_gradient(0);
    INFO("max rel err ", rep.max_rel_err, ", compared ", rep.compared, ", below floor ",
         rep.below_floor);
    CHECK(rep.pass);
}

TEST_CASE("meta-gradient check also passes in the C-channel weight mode") {
    gradcheck::TinyConfig tc;
    tc.wnet_out_channels = tc.num_classes;
    auto rep = gradcheck::check_meta_gradient(0, tc);
    INFO("max rel err ", rep.max_rel_err);
    CHECK(rep.pass);
}

TEST_CASE("alpha=0 kills the meta-gradient") {
    gradcheck::TinyConfig tc;
    tc.alpha = 0.0;
    auto fix = gradcheck::detail::make_tiny(tc, 0);

    Tape<double> tape;
    GraphScope<double> scope(tape);
    auto mf = meta::meta_forward(fix.seg, fix.wnet.params, fix.wnet, fix.batch_s, fix.batch_t,
                                 tc.alpha, true);
    auto g = ops::grad(mf.loss_t, fix.wnet.params);
    double maxabs = 0;
    for (const auto& t : g.grads)
        for (long k = 0; k < t.size(); ++k) maxabs = std::max(maxabs, std::abs((*t.values)[k]));
    CHECK(maxabs == 0.0);
}

TEST_CASE("meta-gradient norm is first-order in alpha") {
    auto norm_at = [&](double alpha) {
        gradcheck::TinyConfig tc;
        tc.alpha = alpha;
        auto fix = gradcheck::detail::make_tiny(tc, 0);
        Tape<double> tape;
        GraphScope<double> scope(tape);
        auto mf = meta::meta_forward(fix.seg, fix.wnet.params, fix.wnet, fix.batch_s, fix.batch_t,
                                     alpha, true);
        auto g = ops::grad(mf.loss_t, fix.wnet.params);
        double s = 0;
        for (const auto& t : g.grads)
            for (long k = 0; k < t.size(); ++k) s += double((*t.values)[k]) * double((*t.values)[k]);
        return std::sqrt(s);
    };
    const double ratio = norm_at(2e-3) / norm_at(1e-3);
    INFO("ratio ", ratio);
    CHECK(ratio > 1.8);
    CHECK(ratio < 2.2);
}

TEST_CASE("pass status is stable across finite-difference steps") {
    for (double h : {1e-4, 1e-5, 1e-6}) {
        gradcheck::TinyConfig tc;
        tc.h = h;
        auto rep = gradcheck::check_meta_gradient(0, tc);
        INFO("h=", h, " max rel err ", rep.max_rel_err);
        CHECK(rep.pass);
    }
}
