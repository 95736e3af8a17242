#include <cmath>
#include <random>

#include "doctest.h"
#include "eib/numerics/autograd.hpp"
#include "eib/numerics/gradcheck.hpp"
#include "eib/numerics/kernels.hpp"
#include "eib/numerics/precision.hpp"
#include "support.hpp"

using namespace eib;
using doctest::Approx;

TEST_CASE("softmax_rows examples") {
    auto s = softmax_rows(Tensor({1, 2}, {0, 0}));
    CHECK(s[0] == Approx(0.5).epsilon(1e-15));
    CHECK(s[1] == Approx(0.5).epsilon(1e-15));
    s = softmax_rows(Tensor({1, 2}, {5, 5}));
    CHECK(s[0] == Approx(0.5).epsilon(1e-15));

    const auto oracle = testing::oracle_softmax({1, 2, 3});
    s = softmax_rows(Tensor({1, 3}, {1, 2, 3}));
    for (int i = 0; i < 3; ++i) CHECK(std::abs(s[i] - oracle[i]) < 1e-12);
    CHECK(std::abs(s[2] - 0.6652409557748219) < 1e-12);
    CHECK(std::abs(s[0] - 0.09003057317038046) < 1e-12);

    CHECK_THROWS_AS(softmax_rows(Tensor({1, 0})), Error);
}

TEST_CASE("softmax rows sum to one on random inputs") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-50, 50);
    for (int c = 0; c < 1000; ++c) {
        const std::size_t cols = 1 + rng() % 16;
        Tensor x({1, cols});
        for (Real& v : x.data()) v = u(rng);
        Tensor s = softmax_rows(x);
        Real sum = 0;
        for (Real v : s.data()) {
            CHECK(v >= 0);
            CHECK(v <= 1);
            sum += v;
        }
        CHECK(std::abs(sum - 1) < 1e-6);
        CHECK(softmax_rows(x) == s);
    }
}

TEST_CASE("kl_divergence examples and properties") {
    CHECK(kl_divergence(Tensor({1, 2}, {0.3, 0.7}), Tensor({1, 2}, {0.3, 0.7})) == 0);
    CHECK(std::abs(kl_divergence(Tensor({1, 2}, {0.5, 0.5}), Tensor({1, 2}, {0.9, 0.1})) -
                   testing::oracle_kl({0.5, 0.5}, {0.9, 0.1})) < 1e-12);
    CHECK(std::abs(kl_divergence(Tensor({1, 2}, {0.5, 0.5}), Tensor({1, 2}, {0.9, 0.1})) - 0.5108256237659907) <
          1e-12);
    CHECK(std::abs(kl_divergence(Tensor({1, 2}, {1.0, 0.0}), Tensor({1, 2}, {0.5, 0.5})) - std::log(2.0)) < 1e-12);
    CHECK_THROWS_AS(kl_divergence(Tensor({1, 2}), Tensor({1, 3})), Error);

    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-5, 5);
    for (int c = 0; c < 500; ++c) {
        Tensor a({2, 5}), b({2, 5});
        for (Real& v : a.data()) v = u(rng);
        for (Real& v : b.data()) v = u(rng);
        const Tensor p = softmax_rows(a), q = softmax_rows(b);
        CHECK(kl_divergence(p, p) == 0);
        CHECK(kl_divergence(p, q) >= -1e-9);
    }
}

TEST_CASE("mse examples and properties") {
    CHECK(mse(Tensor({2}, {0, 0}), Tensor({2}, {2, 0})) == 2.0);
    CHECK(mse(Tensor({2}, {1, 2}), Tensor({2}, {2, 4})) == 2.5);
    CHECK_THROWS_AS(mse(Tensor({2}), Tensor({3})), Error);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0, 3);
    for (int c = 0; c < 200; ++c) {
        Tensor a({7}), b({7});
        for (Real& v : a.data()) v = n(rng);
        for (Real& v : b.data()) v = n(rng);
        CHECK(mse(a, b) == mse(b, a));
        CHECK(mse(a, b) >= 0);
        CHECK(mse(a, a) == 0);
    }
}

TEST_CASE("cross_entropy examples") {
    const std::vector<int> l0{0}, l2{2}, bad{3};
    CHECK(std::abs(cross_entropy(Tensor({1, 2}, {0, 0}), l0) - std::log(2.0)) < 1e-12);
    CHECK(cross_entropy(Tensor({1, 2}, {20, -20}), l0) < 1e-6);
    CHECK(std::abs(cross_entropy(Tensor({1, 3}, {1, 2, 3}), l2) - testing::oracle_nll({1, 2, 3}, 2)) < 1e-12);
    CHECK(std::abs(cross_entropy(Tensor({1, 3}, {1, 2, 3}), l2) - 0.4076059644443803) < 1e-12);
    CHECK_THROWS_AS(cross_entropy(Tensor({1, 3}, {1, 2, 3}), bad), Error);
    try {
        cross_entropy(Tensor({1, 3}, {1, 2, 3}), bad);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::InvalidLabel);
    }
}

TEST_CASE("backward basics") {
    PrecisionScope f64(Precision::F64);
    Parameter w{"w", Tensor({1, 1}, {3.0})};
    Parameter unused{"u", Tensor({1, 1}, {1.0})};
    Tape tape;
    Var wv = tape.leaf(w);
    tape.leaf(unused);
    Var loss = ag::matmul(wv, wv);
    tape.backward(loss);
    CHECK(tape.param_grad(w)[0] == 6.0);
    CHECK(tape.param_grad(unused)[0] == 0.0);

    Tape t2;
    Var c = t2.constant(Tensor::scalar(4.0));
    t2.leaf(w);
    t2.backward(c);
    CHECK(t2.param_grad(w)[0] == 0.0);
}

TEST_CASE("backward rejects stale or foreign losses") {
    Parameter w{"w", Tensor({1, 1}, {3.0})};
    Tape a, b;
    Var loss = ag::matmul(a.leaf(w), a.leaf(w));
    try {
        b.backward(loss);
        FAIL("expected stale-tape error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::StaleTape);
    }
    a.reset();
    CHECK_THROWS_AS(a.backward(loss), Error);
}

TEST_CASE("finite_diff_check on a quadratic is exact to rounding") {
    PrecisionScope f64(Precision::F64);
    Parameter w{"w", Tensor({3, 1}, {0.5, -1.5, 2.0})};
    Parameter a{"a", Tensor({1, 3}, {1.0, 2.0, -0.5})};
    std::vector<Parameter*> ps{&w, &a};
    auto loss = [&](Tape& t) {
        Var y = ag::matmul(t.leaf(a), t.leaf(w));  // scalar a.w
        return ag::matmul(y, y);
    };
    const auto r = finite_diff_check(loss, ps, {1e-4, 0, 1});
    CHECK(r.max_rel_error < 1e-7);
}

TEST_CASE("tape op gradients match finite differences") {
    PrecisionScope f64(Precision::F64);
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n(0, 1);
    auto rand = [&](std::string name, Shape s) {
        Parameter p{std::move(name), Tensor(std::move(s))};
        for (Real& v : p.value.data()) v = n(rng);
        return p;
    };
    Parameter x = rand("x", {6, 8}), w = rand("w", {8, 8}), b = rand("b", {8}), g = rand("g", {8}), be = rand("be", {8});
    Parameter t = rand("t", {2, 8}), k = rand("k", {6, 8});
    std::vector<Parameter*> ps{&x, &w, &b, &g, &be, &t, &k};
    const std::vector<int> mask{1, 1, 0, 1, 1, 1};
    auto loss = [&](Tape& tp) {
        Var h = ag::linear(tp.leaf(x), tp.leaf(w), tp.leaf(b));
        h = ag::layernorm(ag::gelu(h), tp.leaf(g), tp.leaf(be));
        Var kk = tp.leaf(k);
        Var att = ag::attention(h, kk, ag::tanh(kk), mask, {2, 3, 2});
        Var pooled = ag::masked_mean(att, mask, 2, 3);
        Var first = ag::select_rows(att, {0, 3});
        Var kl = ag::kl_logits(tp.leaf(t), ag::add(pooled, first), 2.0);
        Var ce = ag::cross_entropy(ag::scale(pooled, 3.0), {1, 7});
        Var ms = ag::mse(first, tp.leaf(t));
        Var tied = ag::masked_cross_entropy(ag::matmul_bt(att, kk), {2, -1, 0, 5, -1, 1});
        const std::vector<Var> terms{kl, ce, ms, tied};
        const std::vector<Real> weights{1.0, 1.0, 0.5, 0.7};
        return ag::weighted_sum(terms, weights);
    };
    const auto r = finite_diff_check(loss, ps, {1e-3, 0, 1, true});
    INFO(r.worst_param, " ", r.worst_index, " a=", r.worst_analytic, " n=", r.worst_numeric);
    CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("fake_quant forward and straight-through gradients") {
    PrecisionScope f64(Precision::F64);
    Parameter w{"w", Tensor({4}, {0.26, -0.04, 20.0, -0.3125})};
    Parameter s{"s", Tensor({1}, {0.125})};
    Tape tape;
    Var q = ag::fake_quant(tape.leaf(w), tape.leaf(s));
    CHECK(q.value()[0] == 0.25);
    CHECK(q.value()[1] == 0.0);
    CHECK(q.value()[2] == 127 * 0.125);
    CHECK(q.value()[3] == -0.375);  // -2.5 rounds away from zero
    Var loss = ag::weighted_sum(std::vector<Var>{ag::mse(q, tape.constant(Tensor({4})))}, std::vector<Real>{1.0});
    tape.backward(loss);
    const Tensor gw = tape.param_grad(w);
    const Tensor& qv = q.value();
    CHECK(gw[0] == Approx(2 * qv[0] / 4));
    CHECK(gw[2] == 0.0);  // clamped
    Real expect_s = 0;
    const std::vector<double> codes{2, 0, 127, -3};
    for (int i = 0; i < 4; ++i) {
        const double v = w.value[i] / 0.125;
        const double g = 2 * qv[i] / 4;
        expect_s += (i == 2) ? g * 127 : g * (codes[i] - v);
    }
    CHECK(tape.param_grad(s)[0] == Approx(expect_s).epsilon(1e-12));
    CHECK_THROWS_AS(ag::fake_quant(tape.leaf(w), tape.constant(Tensor::scalar(0.0))), Error);
}

TEST_CASE("precision switch rounds op outputs to float") {
    Parameter w{"w", Tensor({1, 1}, {0.1})};
    {
        PrecisionScope f32(Precision::F32);
        Tape t;
        Var y = ag::scale(t.leaf(w), 1.0 / 3.0);
        CHECK(y.value()[0] == static_cast<double>(static_cast<float>(0.1 / 3.0)));
    }
    {
        PrecisionScope f64(Precision::F64);
        Tape t;
        Var y = ag::scale(t.leaf(w), 1.0 / 3.0);
        CHECK(y.value()[0] == 0.1 * (1.0 / 3.0));
    }
}

TEST_CASE("quantize_code rounds half away from zero and clamps") {
    CHECK(quantize_code(2.5) == 3);
    CHECK(quantize_code(-2.5) == -3);
    CHECK(quantize_code(200) == 127);
    CHECK(quantize_code(-200) == -127);
    CHECK(quantize_code(0.49) == 0);
}
