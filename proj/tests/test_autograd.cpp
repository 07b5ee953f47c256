#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "amc/rng.hpp"
#include "amc/tensor.hpp"

using namespace amc;

namespace {

// Central finite difference of a freshly rebuilt scalar; the oracle only
// ever evaluates forward passes, so it stays independent of any backward
// rule it is checking.
double central_diff(const std::function<double()>& eval, Tensor& leaf, std::size_t i, double h) {
    auto& v = leaf.mutable_values();
    double orig = v[i];
    v[i] = orig + h;
    double up = eval();
    v[i] = orig - h;
    double down = eval();
    v[i] = orig;
    return (up - down) / (2 * h);
}

double rel_err(double a, double b) {
    double denom = std::max({std::fabs(a), std::fabs(b), 1e-8});
    return std::fabs(a - b) / denom;
}

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::param(std::move(shape), std::move(v));
}

// max relative error between autodiff gradients and finite differences,
// over all elements of all leaves
double check_grad(const std::function<Tensor()>& build, std::vector<Tensor> leaves, double h = 1e-5) {
    Tensor loss = build();
    auto grads = backward(loss, leaves);
    double worst = 0.0;
    auto eval = [&]() { return build().item(); };
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        for (std::size_t i = 0; i < leaves[li].size(); ++i) {
            double fd = central_diff(eval, leaves[li], i, h);
            worst = std::max(worst, rel_err(grads[li].at(i), fd));
        }
    }
    return worst;
}

} // namespace

TEST_CASE("matmul values") {
    Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor x = Tensor::from({2, 2}, {3, 4, 5, 6});
    Tensor y = matmul(id, x);
    for (std::size_t i = 0; i < 4; ++i) CHECK(y.at(i) == x.at(i));

    Tensor a = Tensor::from({1, 2}, {1, 2});
    Tensor b = Tensor::from({2, 1}, {3, 4});
    CHECK(matmul(a, b).item() == doctest::Approx(11.0).epsilon(1e-12));

    CHECK_THROWS_AS(matmul(Tensor::from({2, 3}, std::vector<double>(6, 1.0)),
                           Tensor::from({2, 2}, std::vector<double>(4, 1.0))),
                    ValidationError);
    try {
        matmul(Tensor::from({2, 3}, std::vector<double>(6, 1.0)),
               Tensor::from({2, 2}, std::vector<double>(4, 1.0)));
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("[2,3]") != std::string::npos);
        CHECK(std::string(e.what()).find("[2,2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient equals transpose broadcast and passes fd") {
    Rng rng(7);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    Tensor loss = sum(matmul(a, b));
    auto grads = backward(loss, {a, b});
    // d sum(ab)/da has rows equal to column sums of b^T
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 4; ++k) {
            double expect = 0;
            for (std::size_t j = 0; j < 2; ++j) expect += b.at(k * 2 + j);
            CHECK(grads[0].at(i * 4 + k) == doctest::Approx(expect).epsilon(1e-12));
        }
    double err = check_grad([&]() { return sum(matmul(a, b)); }, {a, b});
    CHECK(err < 1e-6);
}

TEST_CASE("elementwise examples") {
    Tensor r = relu(Tensor::from({3}, {-1, 0, 2}));
    CHECK(r.at(0) == 0.0);
    CHECK(r.at(1) == 0.0);
    CHECK(r.at(2) == 2.0);

    Tensor m = mul(Tensor::from({2}, {1, 2}), Tensor::from({2}, {3, 4}));
    CHECK(m.at(0) == 3.0);
    CHECK(m.at(1) == 8.0);

    // relu backward at exactly 0 passes 0
    Tensor x = Tensor::param({3}, {-1, 0, 2});
    auto g = backward(sum(relu(x)), {x});
    CHECK(g[0].at(0) == 0.0);
    CHECK(g[0].at(1) == 0.0);
    CHECK(g[0].at(2) == 1.0);

    CHECK_THROWS_AS(log(Tensor::from({2}, {1.0, -0.5})), NumericError);
    CHECK_THROWS_AS(elementwise(EwOp::add, Tensor::from({2}, {1, 2}), Tensor::from({3}, {1, 2, 3})),
                    ValidationError);

    // dispatcher covers the enum
    Tensor two = Tensor::from({2}, {2, 2});
    CHECK(elementwise(EwOp::add, two, two).at(0) == 4.0);
    CHECK(elementwise(EwOp::sub, two, two).at(1) == 0.0);
    CHECK(elementwise(EwOp::mul, two, two).at(0) == 4.0);
    CHECK(elementwise(EwOp::relu, neg(two)).at(0) == 0.0);
    CHECK(elementwise(EwOp::exp, Tensor::from({1}, {0.0})).item() == 1.0);
    CHECK(elementwise(EwOp::log, Tensor::from({1}, {1.0})).item() == 0.0);
}

TEST_CASE("scalar broadcast") {
    Tensor a = Tensor::param({2, 2}, {1, 2, 3, 4});
    Tensor c = Tensor::param({1}, {2.0});
    Tensor y = mul(a, c);
    CHECK(y.at(3) == 8.0);
    auto g = backward(sum(y), {a, c});
    CHECK(g[0].at(0) == 2.0);
    CHECK(g[1].item() == doctest::Approx(10.0).epsilon(1e-12));
}

TEST_CASE("reduce examples") {
    Tensor m = max(Tensor::from({3}, {0.1, 0.9, 0.9}));
    CHECK(m.item() == doctest::Approx(0.9));
    Tensor x = Tensor::param({3}, {0.1, 0.9, 0.9});
    auto g = backward(max(x), {x});
    CHECK(g[0].at(0) == 0.0);
    CHECK(g[0].at(1) == 1.0); // first maximal element wins the tie
    CHECK(g[0].at(2) == 0.0);

    CHECK(mean(Tensor::from({2}, {2, 4})).item() == doctest::Approx(3.0));

    Tensor s = sum(Tensor::from({2, 2}, {1, 2, 3, 4}), 0);
    CHECK(s.shape() == std::vector<std::size_t>{2});
    CHECK(s.at(0) == 4.0);
    CHECK(s.at(1) == 6.0);

    CHECK_THROWS_AS(sum(Tensor::from({2}, {1, 2}), 5), ValidationError);
}

TEST_CASE("softmax examples and Jacobian") {
    Tensor s = softmax(Tensor::from({2}, {0, 0}), 0);
    CHECK(s.at(0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(s.at(1) == doctest::Approx(0.5).epsilon(1e-12));

    Tensor big = softmax(Tensor::from({2}, {1000, 0}), 0);
    CHECK(big.at(0) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(big.at(1) == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(std::isfinite(big.at(0)));

    CHECK_THROWS_AS(softmax(Tensor::from({2}, {std::nan(""), 0.0}), 0), NumericError);

    // Jacobian vs finite differences: check d softmax_j / d x_i through
    // random probing vectors
    Rng rng(3);
    for (int seed = 0; seed < 3; ++seed) {
        Tensor x = random_tensor({4}, rng);
        Tensor probe = random_tensor({4}, rng);
        probe.set_requires_grad(false);
        double err = check_grad([&]() { return sum(mul(softmax(x, 0), probe)); }, {x});
        CHECK(err < 1e-6);
    }
}

TEST_CASE("cross entropy examples") {
    Tensor l0 = cross_entropy(Tensor::from({2}, {0, 0}), Tensor::from({2}, {1, 0}));
    CHECK(l0.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Tensor l1 = cross_entropy(Tensor::from({2}, {10, -10}), Tensor::from({2}, {1, 0}));
    CHECK(l1.item() == doctest::Approx(0.0).epsilon(1e-8));

    CHECK_THROWS_AS(cross_entropy(Tensor::from({2}, {0, 0}), Tensor::from({2}, {1, 1})),
                    ValidationError);
    CHECK_THROWS_AS(cross_entropy(Tensor::from({2}, {0, 0}), Tensor::from({2}, {0.5, 0.5})),
                    ValidationError);

    // gradient equals softmax(logits) - target
    Rng rng(11);
    Tensor logits = random_tensor({5}, rng);
    Tensor target = Tensor::from({5}, {0, 0, 1, 0, 0});
    auto g = backward(cross_entropy(logits, target), {logits});
    Tensor p = softmax(logits, 0);
    for (std::size_t i = 0; i < 5; ++i)
        CHECK(g[0].at(i) == doctest::Approx(p.at(i) - target.at(i)).epsilon(1e-9));
    double err = check_grad([&]() { return cross_entropy(logits, target); }, {logits});
    CHECK(err < 1e-6);
}

TEST_CASE("bilinear resize") {
    Rng rng(5);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor same = bilinear_resize(a, 3, 4);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(same.at(i) == doctest::Approx(a.at(i)).epsilon(1e-12));

    Tensor c = bilinear_resize(Tensor::from({1, 1}, {0.7}), 5, 6);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(c.at(i) == doctest::Approx(0.7).epsilon(1e-12));

    Tensor two = bilinear_resize(Tensor::from({2, 2}, {0, 1, 0, 1}), 2, 3);
    CHECK(two.at(0) == doctest::Approx(0.0));
    CHECK(two.at(1) == doctest::Approx(0.5));
    CHECK(two.at(2) == doctest::Approx(1.0));
    CHECK(two.at(4) == doctest::Approx(0.5));

    CHECK_THROWS_AS(bilinear_resize(a, 0, 3), ValidationError);

    Tensor leaf = random_tensor({3, 3}, rng);
    double err = check_grad([&]() { return sum(mul(bilinear_resize(leaf, 7, 5), 0.3)); }, {leaf});
    CHECK(err < 1e-6);
}

TEST_CASE("layer norm examples") {
    Tensor gain = Tensor::from({3}, {1, 1, 1});
    Tensor bias = Tensor::from({3}, {0.3, 0.4, 0.5});
    Tensor c = layer_norm(Tensor::from({1, 3}, {2, 2, 2}), gain, bias, 1e-5);
    CHECK(c.at(0) == doctest::Approx(0.3).epsilon(1e-9));
    CHECK(c.at(1) == doctest::Approx(0.4).epsilon(1e-9));
    CHECK(c.at(2) == doctest::Approx(0.5).epsilon(1e-9));

    Tensor g2 = Tensor::from({2}, {1, 1});
    Tensor b2 = Tensor::from({2}, {0, 0});
    Tensor r = layer_norm(Tensor::from({1, 2}, {1, -1}), g2, b2, 1e-12);
    CHECK(r.at(0) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(r.at(1) == doctest::Approx(-1.0).epsilon(1e-6));

    Rng rng(9);
    Tensor x = random_tensor({4, 6}, rng);
    Tensor gn = random_tensor({6}, rng, 0.5, 1.5);
    Tensor bs = random_tensor({6}, rng);
    Tensor probe = random_tensor({4, 6}, rng);
    probe.set_requires_grad(false);
    double err = check_grad([&]() { return sum(mul(layer_norm(x, gn, bs, 1e-5), probe)); },
                            {x, gn, bs});
    CHECK(err < 1e-5);
}

TEST_CASE("backward basics") {
    Tensor x = Tensor::param({1}, {3.0});
    auto g = backward(mul(x, x), {x});
    CHECK(g[0].item() == doctest::Approx(6.0).epsilon(1e-12));

    // create_graph: d/dx (d(x^3)/dx) = 6x = 12 at x=2
    Tensor y = Tensor::param({1}, {2.0});
    Tensor cube = mul(mul(y, y), y);
    auto first = backward(cube, {y}, true);
    auto second = backward(first[0], {y});
    CHECK(second[0].item() == doctest::Approx(12.0).epsilon(1e-12));

    // unreachable wrt
    Tensor z = Tensor::param({1}, {1.0});
    CHECK_THROWS_AS(backward(mul(x, x), {z}), ValidationError);
    // non-scalar loss
    CHECK_THROWS_AS(backward(Tensor::param({2}, {1, 2}), {x}), ValidationError);
}

TEST_CASE("second order matches finite differences of first order") {
    Rng rng(21);
    for (int trial = 0; trial < 4; ++trial) {
        Tensor x = random_tensor({3}, rng, 0.5, 2.0);
        Tensor w = random_tensor({3}, rng, 0.5, 2.0);
        auto build_outer = [&]() {
            // L = sum((d f/dx)^2) with f = sum(exp(x*w) + x*x*w)
            Tensor f = sum(add(exp(mul(x, w)), mul(mul(x, x), w)));
            auto gx = backward(f, {x}, true);
            return sum(mul(gx[0], gx[0]));
        };
        Tensor outer = build_outer();
        auto gouter = backward(outer, {x, w});
        auto eval = [&]() { return build_outer().item(); };
        double worst = 0;
        for (std::size_t i = 0; i < 3; ++i) {
            worst = std::max(worst, rel_err(gouter[0].at(i), central_diff(eval, x, i, 1e-5)));
            worst = std::max(worst, rel_err(gouter[1].at(i), central_diff(eval, w, i, 1e-5)));
        }
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("per-op finite difference sweep over random shapes and seeds") {
    // acceptance A1 (op level): rel err < 1e-5 across >= 10 seeds
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(1000 + seed);
        std::size_t r = 2 + seed % 3, c = 2 + (seed / 2) % 4;
        Tensor a = random_tensor({r, c}, rng);
        Tensor b = random_tensor({r, c}, rng);
        Tensor mpos = random_tensor({r, c}, rng, 0.5, 3.0);
        Tensor w = random_tensor({c, r}, rng);

        worst = std::max(worst, check_grad([&]() { return sum(add(a, b)); }, {a, b}));
        worst = std::max(worst, check_grad([&]() { return sum(mul(sub(a, b), a)); }, {a, b}));
        worst = std::max(worst, check_grad([&]() { return sum(div(a, mpos)); }, {a, mpos}));
        worst = std::max(worst, check_grad([&]() { return sum(exp(mul(a, 0.3))); }, {a}));
        worst = std::max(worst, check_grad([&]() { return sum(log(mpos)); }, {mpos}));
        worst = std::max(worst, check_grad([&]() { return sum(sqrt(mpos)); }, {mpos}));
        worst = std::max(worst, check_grad([&]() { return sum(matmul(a, w)); }, {a, w}));
        worst = std::max(worst, check_grad([&]() { return sum(mul(transpose(a), transpose(b))); }, {a, b}));
        worst = std::max(worst, check_grad([&]() { return mean(mul(a, a)); }, {a}));
        worst = std::max(worst, check_grad([&]() { return max(mul(a, b)); }, {a, b}));
        worst = std::max(worst, check_grad([&]() { return sum(max(a, 1)); }, {a}));
        worst = std::max(worst, check_grad([&]() { return sum(mul(expand_axis(sum(a, 0), 0, r), a)); }, {a}));
        worst = std::max(worst, check_grad([&]() { return sum(mul(softmax(a, 1), b)); }, {a}));
        worst = std::max(worst, check_grad([&]() {
            return sum(mul(bilinear_resize(a, r + 2, c + 1), 0.7));
        }, {a}));
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("gather scatter stack slice") {
    Tensor a = Tensor::param({2, 3}, {1, 2, 3, 4, 5, 6});
    auto idx = std::make_shared<std::vector<std::size_t>>(std::vector<std::size_t>{5, 0, 3});
    Tensor g = gather_flat(a, idx, {3});
    CHECK(g.at(0) == 6.0);
    CHECK(g.at(1) == 1.0);
    CHECK(g.at(2) == 4.0);
    double err = check_grad([&]() { return sum(mul(gather_flat(a, idx, {3}), 2.0)); }, {a});
    CHECK(err < 1e-6);

    Tensor row = slice_rows(a, 1, 2);
    CHECK(row.shape() == std::vector<std::size_t>{1, 3});
    CHECK(row.at(0) == 4.0);

    Tensor s = stack_rows<double>({Tensor::from({2}, {1, 2}), Tensor::from({2}, {3, 4})});
    CHECK(s.shape() == std::vector<std::size_t>{2, 2});
    CHECK(s.at(3) == 4.0);

    Tensor cc = concat_rows(a, a);
    CHECK(cc.shape() == std::vector<std::size_t>{4, 3});
    CHECK(cc.at(11) == 6.0);

    Tensor u = Tensor::param({2}, {1, 5});
    auto sidx = std::make_shared<std::vector<std::size_t>>(std::vector<std::size_t>{1, 1});
    Tensor sc = scatter_flat(u, sidx, {3});
    CHECK(sc.at(0) == 0.0);
    CHECK(sc.at(1) == 6.0); // duplicate indices accumulate
    CHECK(sc.at(2) == 0.0);
}

TEST_CASE("tape replay is bit identical and visits nodes once") {
    Rng rng(33);
    Tensor a = random_tensor({4, 4}, rng);
    Tensor b = random_tensor({4, 4}, rng);
    Tensor loss = sum(mul(softmax(matmul(a, b), 1), add(a, b)));
    auto tape = GradientTape::record(loss, {a, b}, false);
    auto g1 = tape.replay();
    auto g2 = tape.replay();
    REQUIRE(g1.size() == 2);
    for (std::size_t t = 0; t < 2; ++t) {
        REQUIRE(g1[t].size() == g2[t].size());
        CHECK(std::memcmp(g1[t].values().data(), g2[t].values().data(),
                          g1[t].size() * sizeof(double)) == 0);
    }
    CHECK(tape.node_count() > 0);
}

TEST_CASE("requires_grad=false tensors never receive gradients") {
    Rng rng(17);
    Tensor a = random_tensor({3}, rng);
    Tensor c = random_tensor({3}, rng);
    c.set_requires_grad(false);
    Tensor loss = sum(mul(a, c));
    auto g = backward(loss, {a});
    CHECK(g[0].at(0) == doctest::Approx(c.at(0)));
    CHECK_THROWS_AS(backward(loss, {c}), ValidationError);
}

TEST_CASE("relu output is nonnegative for random inputs") {
    Rng rng(99);
    for (int t = 0; t < 50; ++t) {
        Tensor x = random_tensor({7}, rng, -100.0, 100.0);
        Tensor y = relu(x);
        for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.at(i) >= 0.0);
    }
}

TEST_CASE("float32 instantiation works end to end") {
    using T32 = TensorT<float>;
    T32 a = T32::param({2, 2}, {1.f, 2.f, 3.f, 4.f});
    T32 b = T32::param({2, 2}, {0.5f, -1.f, 2.f, 0.25f});
    T32 loss = sum(mul(matmul(a, b), 1.0f));
    auto g = backward(loss, {a, b});
    CHECK(g[0].size() == 4);
    // values are float32-rounded
    T32 third = div(T32::scalar(1.f), T32::scalar(3.f));
    CHECK(third.item() == doctest::Approx(1.0f / 3.0f));
    CHECK(sizeof(third.values()[0]) == 4);
}

TEST_CASE("deep chain and fan-out accumulate correctly") {
    Tensor x = Tensor::param({1}, {1.5});
    Tensor y = add(mul(x, x), mul(x, 3.0)); // x^2 + 3x
    Tensor z = mul(y, y);                   // (x^2+3x)^2
    auto g = backward(z, {x});
    double v = 1.5 * 1.5 + 3 * 1.5;
    double expect = 2 * v * (2 * 1.5 + 3);
    CHECK(g[0].item() == doctest::Approx(expect).epsilon(1e-12));
}
