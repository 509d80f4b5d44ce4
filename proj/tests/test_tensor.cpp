#include "support.hpp"

#include "ensdown/autodiff.hpp"
#include "ensdown/error.hpp"
#include "ensdown/gradcheck.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace ensdown;
using testing::random_tensor;

namespace {

// Gradient of sum(weights * op(inputs)) via the tape, and the same function
// evaluated without a tape for finite differences on input `which`.
struct OpProbe {
    std::function<ad::Var(std::vector<ad::Var>&)> op;
    std::vector<Tensor> inputs;
    Tensor weights;

    double eval(std::size_t which, std::span<const double> p) const {
        ad::Tape tape;
        std::vector<ad::Var> vars;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            Tensor t = inputs[i];
            if (i == which) std::copy(p.begin(), p.end(), t.data().begin());
            vars.push_back(tape.constant(t));
        }
        return ad::weighted_sum(op(vars), weights).value().item();
    }

    GradCheckResult check(std::size_t which, double eps = 1e-6) const {
        ad::Tape tape;
        std::vector<ad::Var> vars;
        for (const auto& t : inputs) vars.push_back(tape.parameter(t));
        tape.backward(ad::weighted_sum(op(vars), weights));
        const Tensor g = tape.grad(vars[which]);
        return finite_diff_check([&](std::span<const double> p) { return eval(which, p); }, inputs[which].data(),
                                 g.data(), eps);
    }
};

} // namespace

TEST_CASE("tensor shape bookkeeping") {
    Tensor t(Shape{2, 3, 4}, 1.5);
    CHECK(t.size() == 24);
    CHECK(t.rank() == 3);
    CHECK(t.dim(1) == 3);
    CHECK(shape_string(t.shape()) == "[2,3,4]");
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>(3)), ShapeError);
    CHECK_THROWS_AS((void)t.reshaped(Shape{5, 5}), ShapeError);
    CHECK(t.reshaped(Shape{6, 4}).dim(0) == 6);
    CHECK(Tensor::scalar(3.0).item() == 3.0);
    CHECK_THROWS_AS((void)t.item(), ShapeError);
}

TEST_CASE("conv2d hand examples") {
    ad::Tape tape;
    SUBCASE("all-ones 3x3 input and kernel") {
        auto x = tape.constant(Tensor(Shape{1, 1, 3, 3}, 1.0));
        auto k = tape.constant(Tensor(Shape{1, 1, 3, 3}, 1.0));
        auto b = tape.constant(Tensor(Shape{1}, 0.0));
        const Tensor y = ad::conv2d(x, k, b).value();
        CHECK(y[4] == 9.0);
        CHECK(y[0] == 4.0);
        CHECK(y[2] == 4.0);
        CHECK(y[6] == 4.0);
        CHECK(y[8] == 4.0);
        CHECK(y[1] == 6.0);
    }
    SUBCASE("1x1 unit kernel sums channels") {
        const Tensor xin = random_tensor(Shape{2, 3, 4, 5}, 1);
        auto x = tape.constant(xin);
        auto k = tape.constant(Tensor(Shape{1, 3, 1, 1}, 1.0));
        auto b = tape.constant(Tensor(Shape{1}, 0.0));
        const Tensor y = ad::conv2d(x, k, b).value();
        REQUIRE(y.shape() == Shape{2, 1, 4, 5});
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t p = 0; p < 20; ++p) {
                double s = 0.0;
                for (std::size_t c = 0; c < 3; ++c) s += xin[(n * 3 + c) * 20 + p];
                CHECK(y[n * 20 + p] == doctest::Approx(s).epsilon(1e-14));
            }
    }
    SUBCASE("centered identity kernel reproduces the input exactly") {
        const Tensor xin = random_tensor(Shape{2, 1, 5, 4}, 2);
        Tensor kin(Shape{1, 1, 3, 3}, 0.0);
        kin[4] = 1.0;
        auto y = ad::conv2d(tape.constant(xin), tape.constant(kin), tape.constant(Tensor(Shape{1}))).value();
        CHECK(y == xin);
    }
}

TEST_CASE("conv2d matches a direct loop oracle") {
    const Tensor x = random_tensor(Shape{3, 4, 5, 6}, 3);
    const Tensor k = random_tensor(Shape{7, 4, 3, 3}, 4);
    const Tensor b = random_tensor(Shape{7}, 5);
    ad::Tape tape;
    const Tensor y = ad::conv2d(tape.constant(x), tape.constant(k), tape.constant(b)).value();
    const Tensor ref = testing::naive_conv2d(x, k, b);
    REQUIRE(y.shape() == ref.shape());
    double worst = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) worst = std::max(worst, std::abs(y[i] - ref[i]));
    CHECK(worst < 1e-12);

    SUBCASE("5x5 kernels") {
        const Tensor k5 = random_tensor(Shape{2, 4, 5, 5}, 6);
        const Tensor b5 = random_tensor(Shape{2}, 7);
        const Tensor y5 = ad::conv2d(tape.constant(x), tape.constant(k5), tape.constant(b5)).value();
        const Tensor r5 = testing::naive_conv2d(x, k5, b5);
        for (std::size_t i = 0; i < y5.size(); ++i) CHECK(y5[i] == doctest::Approx(r5[i]).epsilon(1e-12));
    }
}

TEST_CASE("conv2d shape errors") {
    ad::Tape tape;
    auto x = tape.constant(Tensor(Shape{1, 2, 4, 4}));
    CHECK_THROWS_AS(ad::conv2d(x, tape.constant(Tensor(Shape{1, 3, 3, 3})), tape.constant(Tensor(Shape{1}))),
                    ShapeError);
    CHECK_THROWS_AS(ad::conv2d(x, tape.constant(Tensor(Shape{1, 2, 2, 2})), tape.constant(Tensor(Shape{1}))),
                    ShapeError);
    CHECK_THROWS_AS(ad::conv2d(x, tape.constant(Tensor(Shape{1, 2, 3, 3})), tape.constant(Tensor(Shape{2}))),
                    ShapeError);
    CHECK_THROWS_AS(ad::conv2d(tape.constant(Tensor(Shape{2, 4, 4})), tape.constant(Tensor(Shape{1, 2, 3, 3})),
                               tape.constant(Tensor(Shape{1}))),
                    ShapeError);
}

TEST_CASE("conv2d gradients match finite differences") {
    OpProbe probe;
    probe.op = [](std::vector<ad::Var>& v) { return ad::conv2d(v[0], v[1], v[2]); };
    probe.inputs = {random_tensor(Shape{2, 3, 4, 5}, 10), random_tensor(Shape{4, 3, 3, 3}, 11),
                    random_tensor(Shape{4}, 12)};
    SUBCASE("gradient of the plain sum") {
        probe.weights = Tensor(Shape{2, 4, 4, 5}, 1.0);
        for (std::size_t i = 0; i < 3; ++i) CHECK(probe.check(i).max_rel_error < 1e-6);
    }
    SUBCASE("weighted sum") {
        probe.weights = random_tensor(Shape{2, 4, 4, 5}, 13);
        for (std::size_t i = 0; i < 3; ++i) CHECK(probe.check(i).max_rel_error < 1e-6);
    }
}

TEST_CASE("relu") {
    ad::Tape tape;
    auto x = tape.parameter(Tensor::from(Shape{3}, {-1.0, 0.0, 2.0}));
    auto y = ad::relu(x);
    CHECK(y.value() == Tensor::from(Shape{3}, {0.0, 0.0, 2.0}));
    tape.backward(ad::sum(y));
    CHECK(tape.grad(x) == Tensor::from(Shape{3}, {0.0, 0.0, 1.0}));

    ad::Tape neg;
    auto xn = neg.parameter(Tensor::from(Shape{4}, {-3.0, -0.5, -1e-9, -7.0}));
    auto yn = ad::relu(xn);
    CHECK(yn.value() == Tensor(Shape{4}, 0.0));
    neg.backward(ad::sum(yn));
    CHECK(neg.grad(xn) == Tensor(Shape{4}, 0.0));

    OpProbe probe;
    probe.op = [](std::vector<ad::Var>& v) { return ad::relu(v[0]); };
    Tensor in = random_tensor(Shape{50}, 20);
    for (auto& v : in.data()) {
        if (std::abs(v) < 1e-3) v = 0.5;
    }
    probe.inputs = {in};
    probe.weights = random_tensor(Shape{50}, 21);
    CHECK(probe.check(0, 1e-5).max_rel_error < 1e-6);
}

TEST_CASE("dense") {
    ad::Tape tape;
    auto y = ad::dense(tape.constant(Tensor::from(Shape{1, 2}, {1, 2})), tape.constant(Tensor::from(Shape{2, 1}, {1, 1})),
                       tape.constant(Tensor::from(Shape{1}, {1})));
    CHECK(y.value() == Tensor::from(Shape{1, 1}, {4}));

    const Tensor x = random_tensor(Shape{3, 4}, 30);
    Tensor eye(Shape{4, 4}, 0.0);
    for (std::size_t i = 0; i < 4; ++i) eye[i * 5] = 1.0;
    CHECK(ad::dense(tape.constant(x), tape.constant(eye), tape.constant(Tensor(Shape{4}))).value() == x);

    CHECK_THROWS_AS(ad::dense(tape.constant(x), tape.constant(Tensor(Shape{3, 2})), tape.constant(Tensor(Shape{2}))),
                    ShapeError);
    CHECK_THROWS_AS(ad::dense(tape.constant(x), tape.constant(Tensor(Shape{4, 2})), tape.constant(Tensor(Shape{3}))),
                    ShapeError);

    OpProbe probe;
    probe.op = [](std::vector<ad::Var>& v) { return ad::dense(v[0], v[1], v[2]); };
    probe.inputs = {random_tensor(Shape{5, 6}, 31), random_tensor(Shape{6, 3}, 32), random_tensor(Shape{3}, 33)};
    probe.weights = random_tensor(Shape{5, 3}, 34);
    for (std::size_t i = 0; i < 3; ++i) CHECK(probe.check(i).max_rel_error < 1e-6);
}

TEST_CASE("flatten and reshape") {
    const Tensor x = random_tensor(Shape{2, 3, 4, 5}, 40);
    ad::Tape tape;
    auto f = ad::flatten(tape.constant(x));
    CHECK(f.shape() == Shape{2, 60});
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t h = 0; h < 4; ++h)
                for (std::size_t w = 0; w < 5; ++w)
                    CHECK(f.value()[n * 60 + c * 20 + h * 5 + w] == x[((n * 3 + c) * 4 + h) * 5 + w]);
    auto back = ad::reshape(f, Shape{2, 3, 4, 5});
    CHECK(back.value() == x);
    CHECK_THROWS_AS(ad::reshape(f, Shape{7, 7}), ShapeError);
}

TEST_CASE("elementwise ops and slicing") {
    OpProbe probe;
    probe.inputs = {random_tensor(Shape{4, 6}, 50, -3.0, 3.0)};
    probe.weights = random_tensor(Shape{4, 6}, 51);
    SUBCASE("softplus") {
        probe.op = [](std::vector<ad::Var>& v) { return ad::softplus(v[0]); };
        CHECK(probe.check(0).max_rel_error < 1e-6);
    }
    SUBCASE("square") {
        probe.op = [](std::vector<ad::Var>& v) { return ad::square(v[0]); };
        CHECK(probe.check(0).max_rel_error < 1e-6);
    }
    SUBCASE("add_scalar") {
        probe.op = [](std::vector<ad::Var>& v) { return ad::add_scalar(v[0], 2.5); };
        CHECK(probe.check(0).max_rel_error < 1e-6);
    }
    SUBCASE("slice_columns") {
        probe.weights = random_tensor(Shape{4, 2}, 52);
        probe.op = [](std::vector<ad::Var>& v) { return ad::slice_columns(v[0], 3, 2); };
        CHECK(probe.check(0).max_rel_error < 1e-6);
    }
    ad::Tape tape;
    auto sp = ad::softplus(tape.constant(Tensor::from(Shape{3}, {0.0, 800.0, -800.0}))).value();
    CHECK(sp[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(sp[1] == 800.0);
    CHECK(sp[2] >= 0.0);
    CHECK_THROWS_AS(ad::slice_columns(tape.constant(Tensor(Shape{2, 3})), 2, 2), ShapeError);
}

TEST_CASE("backward basics") {
    SUBCASE("sum gives ones") {
        ad::Tape tape;
        auto x = tape.parameter(random_tensor(Shape{3, 2}, 60));
        tape.backward(ad::sum(x));
        CHECK(tape.grad(x) == Tensor(Shape{3, 2}, 1.0));
    }
    SUBCASE("sum of squares") {
        ad::Tape tape;
        auto x = tape.parameter(Tensor::from(Shape{2}, {1.0, 2.0}));
        tape.backward(ad::sum(ad::square(x)));
        CHECK(tape.grad(x) == Tensor::from(Shape{2}, {2.0, 4.0}));
    }
    SUBCASE("non-scalar loss") {
        ad::Tape tape;
        auto x = tape.parameter(Tensor(Shape{2}, 1.0));
        CHECK_THROWS_AS(tape.backward(ad::square(x)), ShapeError);
    }
    SUBCASE("detached loss") {
        ad::Tape tape;
        auto x = tape.constant(Tensor(Shape{2}, 1.0));
        CHECK_THROWS_AS(tape.backward(ad::sum(x)), Error);
    }
    SUBCASE("tape is consumed") {
        ad::Tape tape;
        auto x = tape.parameter(Tensor(Shape{2}, 1.0));
        auto loss = ad::sum(x);
        tape.backward(loss);
        CHECK(tape.consumed());
        CHECK_THROWS_AS(tape.backward(loss), Error);
        tape.reset();
        CHECK(tape.size() == 0);
        CHECK_FALSE(tape.consumed());
    }
    SUBCASE("a Var used twice accumulates both paths") {
        ad::Tape tape;
        auto z = tape.parameter(Tensor::from(Shape{1, 1, 1, 1}, {3.0}));
        auto b = tape.constant(Tensor(Shape{1}, 0.5));
        tape.backward(ad::sum(ad::conv2d(z, z, b)));
        CHECK(tape.grad(z)[0] == 6.0);
    }
}

TEST_CASE("backward visits each op once in reverse order") {
    ad::Tape tape;
    auto x = tape.parameter(random_tensor(Shape{2, 1, 3, 3}, 70));
    auto k = tape.parameter(random_tensor(Shape{2, 1, 3, 3}, 71));
    auto b = tape.parameter(random_tensor(Shape{2}, 72));
    auto h = ad::relu(ad::conv2d(x, k, b));
    auto f = ad::flatten(h);
    auto loss = ad::sum(ad::square(f));
    const auto order = tape.backward(loss);
    REQUIRE(order.size() == 5);
    CHECK(std::is_sorted(order.rbegin(), order.rend()));
    CHECK(std::adjacent_find(order.begin(), order.end()) == order.end());
    CHECK(std::string(tape.op_name(order.front())) == "sum");
    CHECK(std::string(tape.op_name(order.back())) == "conv2d");
}

TEST_CASE("non-finite values are reported") {
    ad::Tape tape;
    Tensor bad(Shape{2}, 1.0);
    bad[1] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(tape.constant(bad), NonFiniteError);
    CHECK_THROWS_AS(tape.parameter(bad), NonFiniteError);
    auto big = tape.constant(Tensor(Shape{1}, 1e200));
    CHECK_THROWS_AS(ad::square(big), NonFiniteError);
}

TEST_CASE("finite_diff_check on closed forms") {
    SUBCASE("quadratic") {
        const std::vector<double> p{0.3, -1.2, 2.5, 0.7};
        auto f = [](std::span<const double> q) {
            double s = 0.0;
            for (std::size_t i = 0; i < q.size(); ++i) s += (i + 1.0) * q[i] * q[i] + q[i];
            return s;
        };
        std::vector<double> g;
        for (std::size_t i = 0; i < p.size(); ++i) g.push_back(2.0 * (i + 1.0) * p[i] + 1.0);
        const auto r = finite_diff_check(f, p, g, 1e-5);
        CHECK(r.max_rel_error < 1e-8);
        CHECK(r.checked == 4);
    }
    SUBCASE("linear") {
        const std::vector<double> p{1.0, 2.0, 3.0};
        const std::vector<double> g{0.5, -2.0, 4.0};
        auto f = [&](std::span<const double> q) { return 0.5 * q[0] - 2.0 * q[1] + 4.0 * q[2]; };
        CHECK(finite_diff_check(f, p, g, 1e-5).max_rel_error < 1e-9);
    }
    SUBCASE("a wrong gradient is caught") {
        const std::vector<double> p{1.0};
        const std::vector<double> g{3.0};
        auto f = [](std::span<const double> q) { return q[0] * q[0]; };
        const auto r = finite_diff_check(f, p, g, 1e-5);
        CHECK(r.max_rel_error == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
        CHECK(r.worst_index == 0);
    }
    SUBCASE("subset of coordinates") {
        const std::vector<double> p{1.0, 2.0, 3.0};
        const std::vector<double> g{2.0, 999.0, 6.0};
        const std::vector<std::size_t> coords{0, 2};
        auto f = [](std::span<const double> q) { return q[0] * q[0] + q[1] * q[1] + q[2] * q[2]; };
        const auto r = finite_diff_check(f, p, g, 1e-5, coords);
        CHECK(r.checked == 2);
        CHECK(r.max_rel_error < 1e-8);
    }
}
