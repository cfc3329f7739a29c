#include <doctest.h>

#include "metapix/gradcheck.hpp"
#include "metapix/ops.hpp"

using namespace metapix;

namespace {

template <class Real>
Tensor<Real> leaf(const Shape& s, std::vector<Real> v) {
    auto t = Tensor<Real>::from(s, std::move(v));
    t.requires_grad = true;
    return t;
}

}  // namespace

TEST_CASE("elementwise primitives: definition points") {
    auto r = ops::relu(Tensor<double>::from({3}, {-1, 0, 2}));
    CHECK((*r.values) == std::vector<double>{0, 0, 2});

    auto s = ops::sigmoid(Tensor<double>::from({1}, {0}));
    CHECK(s.item() == 0.5);
}

TEST_CASE("grad of sum(x*x) is 2x") {
    auto x = leaf<double>({1}, {3.0});
    Tape<double> tape;
    GraphScope<double> scope(tape);
    auto loss = ops::sum_all(ops::mul(x, x));
    auto g = ops::grad(loss, {x});
    REQUIRE(g.reached[0]);
    CHECK((*g.grads[0].values)[0] == doctest::Approx(6.0));
}

TEST_CASE("gradient-on-gradient: second derivative of x*x is 2") {
    auto x = leaf<double>({1}, {3.0});
    Tape<double> tape;
    GraphScope<double> scope(tape);
    auto loss = ops::sum_all(ops::mul(x, x));
    auto g = ops::grad(loss, {x}, {.retain = true, .create_graph = true});
    auto g2 = ops::grad(ops::sum_all(g.grads[0]), {x});
    REQUIRE(g2.reached[0]);
    CHECK((*g2.grads[0].values)[0] == doctest::Approx(2.0));
}

TEST_CASE("grad rejects non-scalar outputs and flags unreachable wrt") {
    auto x = leaf<double>({2}, {1.0, 2.0});
    auto z = leaf<double>({1}, {5.0});
    Tape<double> tape;
    GraphScope<double> scope(tape);
    auto y = ops::mul(x, x);
    CHECK_THROWS(ops::grad(y, {x}));

    auto loss = ops::sum_all(y);
    auto g = ops::grad(loss, {x, z});
    CHECK(g.reached[0]);
    CHECK_FALSE(g.reached[1]);  // z never used: zero gradient, warning flag
    CHECK((*g.grads[1].values)[0] == 0.0);
}

TEST_CASE("retain=false consumes the graph") {
    auto x = leaf<double>({1}, {2.0});
    Tape<double> tape;
    GraphScope<double> scope(tape);
    auto loss = ops::sum_all(ops::mul(x, x));
    (void)ops::grad(loss, {x}, {.retain = false});
    CHECK_THROWS(ops::grad(loss, {x}));
}

TEST_CASE("retain=true allows a second traversal with identical values") {
    auto x = leaf<double>({3}, {0.5, -1.25, 2.0});
    Tape<double> tape;
    GraphScope<double> scope(tape);
    auto loss = ops::sum_all(ops::mul(ops::sigmoid(x), x));
    auto g1 = ops::grad(loss, {x}, {.retain = true});
    auto g2 = ops::grad(loss, {x}, {.retain = true});
    CHECK((*g1.grads[0].values) == (*g2.grads[0].values));
}

TEST_CASE("requires-grad input without an active graph is rejected") {
    auto x = leaf<double>({1}, {1.0});
    CHECK_THROWS(ops::mul(x, x));
    NoGradScope<double> guard;  // explicit opt-out computes plain values
    CHECK(ops::mul(x, x).item() == 1.0);
}

TEST_CASE("differentiable_step arithmetic and identity") {
    auto theta = leaf<double>({1}, {1.0});
    Tape<double> tape;
    GraphScope<double> scope(tape);
    auto g = Tensor<double>::from({1}, {2.0});

    auto stepped = ops::differentiable_step<double>({theta}, {g}, 0.1);
    CHECK(stepped[0].item() == doctest::Approx(0.8));

    auto frozen = ops::differentiable_step<double>({theta}, {g}, 0.0);
    CHECK(frozen[0].item() == theta.item());

    auto bad = Tensor<double>::from({2}, {1.0, 1.0});
    CHECK_THROWS(ops::differentiable_step<double>({theta}, {bad}, 0.1));
}

TEST_CASE("d theta+ / d phi matches finite differences on a toy chain") {
    // theta+ = theta - alpha * d/dtheta [ sum(phi * theta^2) ] = theta - alpha*2*phi*theta
    auto phi = leaf<double>({3}, {0.4, -0.7, 1.1});
    auto theta = leaf<double>({3}, {1.0, 2.0, -0.5});
    const double alpha = 0.05;

    auto run = [&](const Tensor<double>& p) {
        Tape<double> tape;
        GraphScope<double> scope(tape);
        auto loss_s = ops::sum_all(ops::mul(p, ops::mul(theta, theta)));
        auto gth = ops::grad(loss_s, {theta}, {.retain = true, .create_graph = true});
        auto theta_plus = ops::differentiable_step<double>({theta}, gth.grads, alpha);
        // scalar probe of theta+
        auto probe = Tensor<double>::from({3}, {0.3, -1.0, 0.8});
        auto out = ops::sum_all(ops::mul(theta_plus[0], probe));
        return std::pair{out, tape.id()};
    };

    Tape<double> tape;
    GraphScope<double> scope(tape);
    auto loss_s = ops::sum_all(ops::mul(phi, ops::mul(theta, theta)));
    auto gth = ops::grad(loss_s, {theta}, {.retain = true, .create_graph = true});
    auto theta_plus = ops::differentiable_step<double>({theta}, gth.grads, alpha);
    auto probe = Tensor<double>::from({3}, {0.3, -1.0, 0.8});
    auto out = ops::sum_all(ops::mul(theta_plus[0], probe));
    auto analytic = ops::grad(out, {phi}).grads;

    auto fn = [&](const std::vector<Tensor<double>>& p) {
        Tape<double> t2;
        GraphScope<double> s2(t2);
        auto ph = p[0];
        ph.requires_grad = true;
        auto ls = ops::sum_all(ops::mul(ph, ops::mul(theta, theta)));
        auto gt = ops::grad(ls, {theta}, {.retain = true, .create_graph = true});
        auto tp = ops::differentiable_step<double>({theta}, gt.grads, alpha);
        return ops::sum_all(ops::mul(tp[0], probe)).item();
    };
    auto numeric = gradcheck::finite_diff(fn, {phi}, 1e-5);
    auto rep = gradcheck::compare_gradients("toy-chain", analytic, numeric, {"phi"}, 1e-6);
    CHECK(rep.pass);
    (void)run;
}

TEST_CASE("2-layer conv-relu loss gradient matches finite differences") {
    Rng rng(99);
    auto rnd = [&](const Shape& s) {
        auto t = Tensor<double>::zeros(s);
        for (long k = 0; k < t.size(); ++k) (*t.values)[k] = rng.uniform(-0.8, 0.8);
        return t;
    };
    auto x = rnd({1, 2, 6, 6});
    auto w1 = rnd({3, 2, 3, 3});
    auto w2 = rnd({2, 3, 3, 3});
    w1.requires_grad = true;
    w2.requires_grad = true;

    auto forward = [&](const Tensor<double>& a, const Tensor<double>& b) {
        auto h = ops::relu(ops::conv2d(x, a));
        auto y = ops::relu(ops::conv2d(h, b));
        return ops::sum_all(ops::mul(y, y));
    };

    Tape<double> tape;
    std::vector<Tensor<double>> analytic;
    {
        GraphScope<double> scope(tape);
        analytic = ops::grad(forward(w1, w2), {w1, w2}).grads;
    }
    auto fn = [&](const std::vector<Tensor<double>>& p) { return forward(p[0], p[1]).item(); };
    auto numeric = gradcheck::finite_diff(fn, {w1, w2}, 1e-5);
    auto rep = gradcheck::compare_gradients("conv-relu", analytic, numeric, {"w1", "w2"}, 1e-6);
    INFO("max rel err ", rep.max_rel_err);
    CHECK(rep.pass);
}

TEST_CASE("linearity of grad over loss combinations") {
    Rng rng(5);
    auto x = Tensor<double>::zeros({8});
    for (long k = 0; k < x.size(); ++k) (*x.values)[k] = rng.uniform(-1, 1);
    x.requires_grad = true;
    const double a = 1.7, b = -0.35;

    auto l1 = [&] { return ops::sum_all(ops::mul(x, x)); };
    auto l2 = [&] { return ops::sum_all(ops::sigmoid(x)); };

    Tape<double> tape;
    GraphScope<double> scope(tape);
    auto combined = ops::add(ops::mul_scalar(l1(), a), ops::mul_scalar(l2(), b));
    auto gc = ops::grad(combined, {x}).grads[0];
    auto g1 = ops::grad(l1(), {x}).grads[0];
    auto g2 = ops::grad(l2(), {x}).grads[0];
    for (long k = 0; k < x.size(); ++k)
        CHECK((*gc.values)[k] ==
              doctest::Approx(a * (*g1.values)[k] + b * (*g2.values)[k]).epsilon(1e-12));
}

TEST_CASE("determinism: identical seeds give bit-identical gradients") {
    auto run = [] {
        Rng rng(1234);
        auto x = Tensor<float>::zeros({1, 3, 8, 8});
        auto w = Tensor<float>::zeros({4, 3, 3, 3});
        for (long k = 0; k < x.size(); ++k) (*x.values)[k] = float(rng.uniform(-1, 1));
        for (long k = 0; k < w.size(); ++k) (*w.values)[k] = float(rng.uniform(-1, 1));
        w.requires_grad = true;
        Tape<float> tape;
        GraphScope<float> scope(tape);
        auto y = ops::relu(ops::conv2d(x, w));
        auto g = ops::grad(ops::sum_all(ops::mul(y, y)), {w});
        return *g.grads[0].values;
    };
    CHECK(run() == run());
}

TEST_CASE("shape errors name the primitive and shapes") {
    auto a = Tensor<double>::zeros({2, 3});
    auto b = Tensor<double>::zeros({3, 2});
    try {
        (void)ops::add(a, b);
        FAIL("expected throw");
    } catch (const std::exception& e) {
        const std::string msg = e.what();
        CHECK(msg.find("add") != std::string::npos);
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[3,2]") != std::string::npos);
    }
}

TEST_CASE("finite differences certify every primitive") {
    for (const auto& rep : gradcheck::check_all_primitives(0)) {
        INFO(rep.name, ": max rel err ", rep.max_rel_err);
        CHECK(rep.pass);
    }
}

TEST_CASE("finite_diff oracle on closed forms") {
    auto x = Tensor<double>::from({1}, {3.0});
    auto sq = [](const std::vector<Tensor<double>>& p) { return p[0].item() * p[0].item(); };
    auto g = gradcheck::finite_diff(sq, {x}, 1e-5);
    CHECK(g[0][0] == doctest::Approx(6.0).epsilon(1e-9));

    auto c = [](const std::vector<Tensor<double>>&) { return 42.0; };
    auto gz = gradcheck::finite_diff(c, {x}, 1e-5);
    CHECK(std::abs(gz[0][0]) < 1e-10);

    auto x2 = Tensor<double>::from({1}, {0.7});
    auto sine = [](const std::vector<Tensor<double>>& p) { return std::sin(p[0].item()); };
    auto gs = gradcheck::finite_diff(sine, {x2}, 1e-5);
    CHECK(gs[0][0] == doctest::Approx(std::cos(0.7)).epsilon(1e-9));
}
