// Reverse-mode tape: forward semantics, adjoints, the finite-difference
// oracle, and the per-op gradient-check property.
#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "vseg/gradcheck.hpp"
#include "vseg/objective.hpp"
#include "vseg/random.hpp"
#include "vseg/tape.hpp"
#include "vseg/tensor.hpp"

#include "helpers.hpp"

using namespace vseg;
using test_helpers::rnd_tensor;

TEST_CASE("elementwise forward semantics") {
    Tape32 tape;
    Tensor32 a = tape.constant(Tensor32({2}, {1.0f, 2.0f}));
    Tensor32 b = tape.constant(Tensor32({2}, {3.0f, 4.0f}));

    Tensor32 sum = tape.add(a, b);
    CHECK(sum.at(0) == 4.0f);
    CHECK(sum.at(1) == 6.0f);

    Tensor32 diff = tape.sub(b, a);
    CHECK(diff.at(0) == 2.0f);
    CHECK(diff.at(1) == 2.0f);

    Tensor32 prod = tape.mul(a, b);
    CHECK(prod.at(0) == 3.0f);
    CHECK(prod.at(1) == 8.0f);

    Tensor32 r = tape.relu(tape.constant(Tensor32({2}, {-1.5f, 2.0f})));
    CHECK(r.at(0) == 0.0f);
    CHECK(r.at(1) == 2.0f);

    CHECK(tape.sigmoid(tape.constant_scalar(0.0f)).item() == 0.5f);
    CHECK(tape.exp(tape.constant_scalar(0.0f)).item() == 1.0f);
    CHECK(tape.log(tape.constant_scalar(1.0f)).item() == 0.0f);
    CHECK(tape.softplus(tape.constant_scalar(0.0f)).item() == Catch::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("conv2d with a 1x1 identity kernel reproduces the image") {
    RandomGen rng(3);
    Tape32 tape;
    Tensor32 img = rnd_tensor<float>(rng, {1, 5, 7}, 0.0, 1.0);
    Tensor32 k = tape.constant(Tensor32({1, 1, 1, 1}, {1.0f}));
    Tensor32 out = tape.conv2d(tape.constant(img), k, 1, 0);
    REQUIRE(out.shape() == Shape{1, 5, 7});
    CHECK((bitwise_equal(out, img.with_requires_grad(false)) || max_abs_diff(out, img) == 0.0));
}

TEST_CASE("conv2d hand example with stride and padding") {
    Tape32 tape;
    Tensor32 img = tape.constant(Tensor32({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
    Tensor32 k = tape.constant(Tensor32({1, 1, 2, 2}, {1, 1, 1, 1}));

    Tensor32 valid = tape.conv2d(img, k, 1, 0);
    REQUIRE(valid.shape() == Shape{1, 2, 2});
    CHECK(valid.at(0) == 12.0f); // 1+2+4+5
    CHECK(valid.at(1) == 16.0f);
    CHECK(valid.at(2) == 24.0f);
    CHECK(valid.at(3) == 28.0f);

    Tensor32 strided = tape.conv2d(img, k, 2, 1);
    REQUIRE(strided.shape() == Shape{1, 2, 2}); // (3+2-2)/2+1 = 2
    CHECK(strided.at(0) == 1.0f);               // only the corner pixel under pad
    CHECK(strided.at(1) == 5.0f);               // 2+3
    CHECK(strided.at(2) == 11.0f);              // 4+7
    CHECK(strided.at(3) == 28.0f);              // 5+6+8+9
}

TEST_CASE("matmul hand example") {
    Tape32 tape;
    Tensor32 a = tape.constant(Tensor32({2, 2}, {1, 2, 3, 4}));
    Tensor32 b = tape.constant(Tensor32({2, 2}, {5, 6, 7, 8}));
    Tensor32 c = tape.matmul(a, b);
    CHECK(c.at(0) == 19.0f);
    CHECK(c.at(1) == 22.0f);
    CHECK(c.at(2) == 43.0f);
    CHECK(c.at(3) == 50.0f);
}

TEST_CASE("reductions produce [1] scalars") {
    Tape32 tape;
    Tensor32 x = tape.constant(Tensor32({3}, {1, 2, 3}));
    Tensor32 s = tape.sum(x);
    Tensor32 m = tape.mean(x);
    REQUIRE(s.shape() == Shape{1});
    CHECK(s.item() == 6.0f);
    CHECK(m.item() == 2.0f);
}

TEST_CASE("concat and slice are inverses") {
    RandomGen rng(5);
    Tape32 tape;
    Tensor32 a = tape.constant(rnd_tensor<float>(rng, {2, 3}));
    Tensor32 b = tape.constant(rnd_tensor<float>(rng, {2, 2}));
    Tensor32 cat = tape.concat(a, b, 1);
    REQUIRE(cat.shape() == Shape{2, 5});
    Tensor32 a2 = tape.slice(cat, 1, 0, 3);
    Tensor32 b2 = tape.slice(cat, 1, 3, 2);
    CHECK(max_abs_diff(a2, a) == 0.0);
    CHECK(max_abs_diff(b2, b) == 0.0);
}

TEST_CASE("broadcast_to expands trailing dimensions") {
    Tape32 tape;
    Tensor32 v = tape.constant(Tensor32({2}, {3.0f, 4.0f}));
    Tensor32 e = tape.broadcast_to(v, {2, 3});
    REQUIRE(e.shape() == Shape{2, 3});
    for (int j = 0; j < 3; ++j) {
        CHECK(e.at(j) == 3.0f);
        CHECK(e.at(3 + j) == 4.0f);
    }
    Tensor32 s = tape.broadcast_to(tape.constant_scalar(7.0f), {2, 2});
    for (int i = 0; i < 4; ++i) CHECK(s.at(i) == 7.0f);
}

TEST_CASE("reshape preserves row-major order") {
    Tape32 tape;
    Tensor32 x = tape.constant(Tensor32({2, 3}, {1, 2, 3, 4, 5, 6}));
    Tensor32 y = tape.reshape(x, {3, 2});
    REQUIRE(y.shape() == Shape{3, 2});
    for (int i = 0; i < 6; ++i) CHECK(y.at(i) == float(i + 1));
}

TEST_CASE("upsample2x duplicates rows and columns") {
    Tape32 tape;
    Tensor32 x = tape.constant(Tensor32({1, 1, 2}, {1.0f, 2.0f}));
    Tensor32 y = tape.upsample2x(x);
    REQUIRE(y.shape() == Shape{1, 2, 4});
    const float want[] = {1, 1, 2, 2, 1, 1, 2, 2};
    for (int i = 0; i < 8; ++i) CHECK(y.at(i) == want[i]);
}

TEST_CASE("backward: d(x*x)/dx at x=3 is 6") {
    Tape32 tape;
    Tensor32 x = tape.leaf({1}, {3.0f});
    Tensor32 loss = tape.mul(x, x);
    GradientMap32 g = tape.backward(loss);
    REQUIRE(g.contains(x));
    CHECK(g.at(x).item() == 6.0f);
}

TEST_CASE("backward: sum gives an all-ones gradient") {
    RandomGen rng(7);
    Tape32 tape;
    Tensor32 x = tape.leaf(rnd_tensor<float>(rng, {2, 3, 4}).with_requires_grad(true));
    GradientMap32 g = tape.backward(tape.sum(x));
    const Tensor32& gx = g.at(x);
    REQUIRE(gx.shape() == x.shape());
    for (std::int64_t i = 0; i < gx.numel(); ++i) CHECK(gx.at(i) == 1.0f);
}

TEST_CASE("backward: mean(relu(conv2d)) matches finite differences") {
    RandomGen rng(11);
    std::vector<Tensor64> params = {rnd_tensor<double>(rng, {2, 5, 5}), rnd_tensor<double>(rng, {2, 2, 3, 3})};
    const double err = finite_diff_check<double>(
        [](Tape64& tape, const std::vector<Tensor64>& p) {
            return tape.mean(tape.relu(tape.conv2d(p[0], p[1], 1, 1)));
        },
        params, 1e-5);
    CHECK(err < 1e-4);
}

namespace {

// Random inputs and attrs appropriate for one op kind.
struct OpCase {
    std::vector<Tensor64> inputs;
    OpAttrs attrs;
};

OpCase make_op_case(Op kind, RandomGen& rng) {
    OpCase c;
    const auto rnd = [&](Shape s) { return rnd_tensor<double>(rng, std::move(s)); };
    switch (kind) {
        case Op::Add:
        case Op::Sub:
        case Op::Mul:
            c.inputs = {rnd({3, 4}), rnd({3, 4})};
            break;
        case Op::MatMul:
            c.inputs = {rnd({3, 4}), rnd({4, 2})};
            break;
        case Op::Conv2d:
            c.inputs = {rnd({2, 6, 6}), rnd({3, 2, 3, 3})};
            c.attrs.stride = 2;
            c.attrs.pad = 1;
            break;
        case Op::Log: {
            Tensor64 t = rnd({3, 4});
            std::vector<double> v(t.data().begin(), t.data().end());
            for (auto& x : v) x = 1.5 + 0.5 * x; // log needs positive inputs
            c.inputs = {Tensor64({3, 4}, std::move(v))};
            break;
        }
        case Op::Concat:
            c.inputs = {rnd({2, 3}), rnd({2, 2})};
            c.attrs.axis = 1;
            break;
        case Op::Slice:
            c.inputs = {rnd({3, 5})};
            c.attrs.axis = 1;
            c.attrs.start = 1;
            c.attrs.len = 3;
            break;
        case Op::Broadcast:
            c.inputs = {rnd({3, 1, 1})};
            c.attrs.target = {3, 4, 2};
            break;
        case Op::Reshape:
            c.inputs = {rnd({3, 4})};
            c.attrs.target = {2, 6};
            break;
        case Op::Upsample2x:
            c.inputs = {rnd({2, 3, 3})};
            break;
        default:
            c.inputs = {rnd({3, 4})};
            break;
    }
    return c;
}

} // namespace

TEST_CASE("gradient-check property holds for every registered op kind") {
    RandomGen rng(13);
    REQUIRE(kOpKinds.size() == 17);
    for (Op kind : kOpKinds) {
        OpCase c = make_op_case(kind, rng);
        // To exercise Sigmoid/Exp-style value-dependent adjoints on non-scalar
        // outputs, reduce with sum after the op under test.
        const double err = finite_diff_check<double>(
            [&](Tape64& tape, const std::vector<Tensor64>& bound) {
                return tape.sum(tape.forward_op(kind, bound, c.attrs));
            },
            c.inputs, 1e-5);
        INFO("op kind: " << op_name(kind));
        CHECK(err < 1e-4);
    }
}

TEST_CASE("backward is linear in the loss") {
    RandomGen rng(17);
    Tensor64 x0 = rnd_tensor<double>(rng, {4});
    const double a = 2.5, b = -1.25;

    const auto grad_of = [&](auto&& lossfn) {
        Tape64 tape;
        Tensor64 x = tape.leaf(x0.with_requires_grad(true));
        GradientMap64 g = tape.backward(lossfn(tape, x));
        return g.at(x);
    };

    Tensor64 gf = grad_of([](Tape64& t, const Tensor64& x) { return t.sum(t.mul(x, x)); });
    Tensor64 gg = grad_of([](Tape64& t, const Tensor64& x) { return t.sum(t.exp(x)); });
    Tensor64 gc = grad_of([&](Tape64& t, const Tensor64& x) {
        Tensor64 f = t.sum(t.mul(x, x));
        Tensor64 g = t.sum(t.exp(x));
        return t.add(t.mul(f, t.constant_scalar(a)), t.mul(g, t.constant_scalar(b)));
    });

    for (std::int64_t i = 0; i < x0.numel(); ++i)
        CHECK(std::abs(gc.at(i) - (a * gf.at(i) + b * gg.at(i))) < 1e-6);
}

TEST_CASE("gradients are bitwise deterministic") {
    RandomGen rng(19);
    Tensor32 x0 = rnd_tensor<float>(rng, {3, 4});
    Tensor32 k0 = rnd_tensor<float>(rng, {1, 1, 3, 3});

    const auto run = [&]() {
        Tape32 tape;
        Tensor32 x = tape.leaf(x0.with_requires_grad(true));
        Tensor32 k = tape.leaf(k0.with_requires_grad(true));
        Tensor32 loss = tape.mean(tape.sigmoid(tape.conv2d(tape.reshape(x, {1, 3, 4}), k, 1, 1)));
        GradientMap32 g = tape.backward(loss);
        return std::pair{g.at(x), g.at(k)};
    };

    auto [gx1, gk1] = run();
    auto [gx2, gk2] = run();
    CHECK(bitwise_equal(gx1, gx2));
    CHECK(bitwise_equal(gk1, gk2));
}

TEST_CASE("shape errors name the op kind and offending dims") {
    Tape32 tape;
    Tensor32 a = tape.constant(Tensor32({2}, {1, 2}));
    Tensor32 b = tape.constant(Tensor32({3}, {1, 2, 3}));

    try {
        tape.add(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("add") != std::string::npos);
        CHECK(msg.find("[2]") != std::string::npos);
        CHECK(msg.find("[3]") != std::string::npos);
    }

    CHECK_THROWS_AS(tape.matmul(tape.constant(Tensor32({2, 3}, std::vector<float>(6))),
                                tape.constant(Tensor32({2, 2}, std::vector<float>(4)))),
                    ShapeError);
    CHECK_THROWS_AS(tape.conv2d(tape.constant(Tensor32({2, 4, 4}, std::vector<float>(32))),
                                tape.constant(Tensor32({1, 3, 3, 3}, std::vector<float>(27))), 1, 1),
                    ShapeError);
    CHECK_THROWS_AS(tape.slice(tape.constant(Tensor32({2, 3}, std::vector<float>(6))), 1, 2, 2), ShapeError);
    CHECK_THROWS_AS(tape.concat(tape.constant(Tensor32({2}, {1, 2})), tape.constant(Tensor32({2}, {1, 2})), 1),
                    InputError);
    CHECK_THROWS_AS(tape.reshape(tape.constant(Tensor32({2, 3}, std::vector<float>(6))), {4, 2}), ShapeError);
    CHECK_THROWS_AS(tape.broadcast_to(tape.constant(Tensor32({3}, {1, 2, 3})), {2, 3}), ShapeError);
}

TEST_CASE("tape contract violations") {
    SECTION("backward requires a scalar loss") {
        Tape32 tape;
        Tensor32 x = tape.leaf({2}, {1.0f, 2.0f});
        CHECK_THROWS_AS(tape.backward(tape.mul(x, x)), ContractViolation);
    }
    SECTION("a tape can only be consumed once") {
        Tape32 tape;
        Tensor32 x = tape.leaf({1}, {2.0f});
        Tensor32 loss = tape.mul(x, x);
        (void)tape.backward(loss);
        CHECK(tape.consumed());
        CHECK_THROWS_AS(tape.backward(loss), ContractViolation);
    }
    SECTION("tensors cannot cross tapes") {
        Tape32 t1, t2;
        Tensor32 x = t1.leaf({1}, {1.0f});
        CHECK_THROWS_AS(t2.mul(x, x), ContractViolation);
    }
    SECTION("a bound tensor cannot be re-registered as a leaf") {
        Tape32 tape;
        Tensor32 x = tape.leaf({1}, {1.0f});
        CHECK_THROWS_AS(tape.leaf(x), ContractViolation);
    }
    SECTION("requires_grad tensors must enter via leaf()") {
        Tape32 tape;
        Tensor32 x = Tensor32({1}, {1.0f}, true);
        CHECK_THROWS_AS(tape.mul(x, x), ContractViolation);
    }
    SECTION("gradients of unreachable leaves are absent, not zero") {
        Tape32 tape;
        Tensor32 x = tape.leaf({1}, {1.0f});
        Tensor32 y = tape.leaf({1}, {2.0f});
        GradientMap32 g = tape.backward(tape.mul(x, x));
        CHECK(g.contains(x));
        CHECK_FALSE(g.contains(y));
        CHECK_THROWS_AS(g.at(y), ContractViolation);
    }
}

TEST_CASE("finite_diff_check examples") {
    SECTION("f(x) = x^2 at x=3") {
        std::vector<Tensor64> p = {Tensor64({1}, {3.0})};
        const double err = finite_diff_check<double>(
            [](Tape64& t, const std::vector<Tensor64>& b) { return t.mul(b[0], b[0]); }, p, 1e-4);
        CHECK(err < 1e-6);
    }
    SECTION("constant function has zero error") {
        std::vector<Tensor64> p = {Tensor64({2}, {1.0, 2.0})};
        const double err = finite_diff_check<double>(
            [](Tape64& t, const std::vector<Tensor64>&) { return t.constant_scalar(4.0); }, p, 1e-4);
        CHECK(err == 0.0);
    }
    SECTION("eps must lie in (0, 1e-2]") {
        std::vector<Tensor64> p = {Tensor64({1}, {1.0})};
        const auto fn = [](Tape64& t, const std::vector<Tensor64>& b) { return t.sum(b[0]); };
        CHECK_THROWS_AS(finite_diff_check<double>(fn, p, 0.0), InputError);
        CHECK_THROWS_AS(finite_diff_check<double>(fn, p, 0.1), InputError);
    }
    SECTION("non-scalar objective is a contract violation") {
        std::vector<Tensor64> p = {Tensor64({2}, {1.0, 2.0})};
        const auto fn = [](Tape64& t, const std::vector<Tensor64>& b) { return t.mul(b[0], b[0]); };
        CHECK_THROWS_AS(finite_diff_check<double>(fn, p, 1e-4), ContractViolation);
    }
}

TEST_CASE("finite_diff_check on a two-layer ELBO-style composite") {
    // Two conv layers per branch on an 8x8 input, all three loss terms live.
    RandomGen rng(23);
    Tensor64 x = rnd_tensor<double>(rng, {1, 8, 8}, 0.0, 1.0);
    Tensor64 s = test_helpers::rnd_binary<double>(rng, {1, 8, 8});
    Tensor64 eps = rnd_tensor<double>(rng, {2});

    std::vector<Tensor64> params = {
        rnd_tensor<double>(rng, {2}, -0.5, 0.5),          // mu
        rnd_tensor<double>(rng, {2}, -0.5, 0.5),          // log sigma
        rnd_tensor<double>(rng, {4, 3, 3, 3}, -0.3, 0.3), // seg layer 1
        rnd_tensor<double>(rng, {1, 4, 3, 3}, -0.3, 0.3), // seg layer 2
        rnd_tensor<double>(rng, {4, 2, 3, 3}, -0.3, 0.3), // dec layer 1
        rnd_tensor<double>(rng, {1, 4, 3, 3}, -0.3, 0.3), // dec layer 2
    };

    const auto loss_fn = [&](Tape64& tape, const std::vector<Tensor64>& p) {
        LatentPosterior<double> post{p[0], p[1]};
        LatentSample<double> zs = reparameterize(tape, post, eps);
        Tensor64 zmap = tape.broadcast_to(tape.reshape(zs.z, {2, 1, 1}), {2, 8, 8});
        Tensor64 xc = tape.constant(x);
        Tensor64 seg_in = tape.concat(xc, zmap, 0);
        Tensor64 logits = tape.conv2d(tape.relu(tape.conv2d(seg_in, p[2], 1, 1)), p[3], 1, 1);
        Tensor64 x_hat = tape.sigmoid(tape.conv2d(tape.relu(tape.conv2d(zmap, p[4], 1, 1)), p[5], 1, 1));
        LossTerms<double> lt = total_loss(tape, logits, tape.constant(s), xc, x_hat, post, LossWeights{});
        return lt.total;
    };

    const double err = finite_diff_check<double>(loss_fn, params, 1e-5);
    CHECK(err < 1e-4);
}
