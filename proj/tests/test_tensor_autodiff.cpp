#include "doctest.h"

#include <cmath>

#include "matquant/autodiff.hpp"
#include "matquant/quant.hpp"

using namespace matquant;

TEST_CASE("tensor shape and data invariants") {
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.dim(0) == 2);
    CHECK(t.mat2d()(1, 2) == 6.0);
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
    CHECK_THROWS_AS(Tensor::zeros({0, 3}), DimensionError);
}

TEST_CASE("matmul forward matches hand values") {
    Tape tape(false);
    Var id2 = tape.constant(Tensor::from({2, 2}, {1, 0, 0, 1}));
    Var b = tape.constant(Tensor::from({2, 2}, {2, 3, 4, 5}));
    Tensor out = matmul(id2, b).value();
    CHECK(out[0] == 2.0);
    CHECK(out[1] == 3.0);
    CHECK(out[2] == 4.0);
    CHECK(out[3] == 5.0);

    Var r = tape.constant(Tensor::from({1, 2}, {1, 2}));
    Var c = tape.constant(Tensor::from({2, 1}, {3, 4}));
    CHECK(matmul(r, c).value()[0] == 11.0);

    Var bad = tape.constant(Tensor::from({3, 1}, {1, 2, 3}));
    CHECK_THROWS_AS(matmul(r, bad), DimensionError);
}

TEST_CASE("matmul backward: dA = dC.B^T exactly") {
    Param a(Tensor::from({1, 2}, {1, 2}));
    Tape tape;
    Var av = tape.leaf(a);
    Var bv = tape.constant(Tensor::from({2, 1}, {3, 4}));
    Var loss = sum(matmul(av, bv));
    tape.backward(loss);
    CHECK(a.grad[0] == 3.0);
    CHECK(a.grad[1] == 4.0);
}

TEST_CASE("gradient accumulates across shared subexpressions") {
    Param x(Tensor::from({3}, {0.5, -1.0, 2.0}));
    Tape tape;
    Var v = tape.leaf(x);
    Var once = sum(square(v));
    tape.backward(once);
    Tensor single = x.grad;

    x.zero_grad();
    Tape tape2;
    Var v2 = tape2.leaf(x);
    Var twice = add(sum(square(v2)), sum(square(v2)));
    tape2.backward(twice);
    for (Index i = 0; i < 3; ++i) CHECK(x.grad[i] == 2.0 * single[i]);
}

TEST_CASE("non-finite forward output raises") {
    Tape tape(false);
    Var big = tape.constant(Tensor::full({4}, 1e308));
    CHECK_THROWS_AS(add(big, big), NumericError);
}

TEST_CASE("grad_check closed forms") {
    // f = sum(x^2): analytic gradient 2x.
    auto sq = [](Tape& t, Var x) { return sum(square(x)); };
    CHECK(grad_check(sq, Tensor::from({3}, {1, 2, 3})) < 1e-6);

    // constant f: zero gradient, zero error.
    auto cst = [](Tape& t, Var x) { return t.constant(Tensor::scalar(3.0)); };
    CHECK(grad_check(cst, Tensor::from({3}, {1, 2, 3})) == 0.0);

    // softmax cross-entropy on 4 logits.
    auto ce = [](Tape& t, Var x) { return softmax_xent(x, {2}); };
    CHECK(grad_check(ce, Tensor::from({1, 4}, {0.3, -0.7, 1.1, 0.2})) < 1e-5);

    auto vec = [](Tape& t, Var x) { return t.constant(Tensor::from({2}, {1, 2})); };
    CHECK_THROWS_AS(grad_check(vec, Tensor::from({2}, {1, 2})), ContractError);
}

TEST_CASE("every smooth op passes randomized finite-difference checks") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        auto rand_tensor = [&](std::vector<Index> shape) {
            Tensor t(std::move(shape));
            for (Index i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-2.0, 2.0);
            return t;
        };

        Tensor m34 = rand_tensor({3, 4});
        Tensor m43 = rand_tensor({4, 3});
        Tensor v4 = rand_tensor({4});
        Tensor v4pos = v4;
        v4pos.array() = v4pos.array().abs() + 0.5;
        Tensor sq4 = rand_tensor({4, 4});

        auto ck = [&](const char* name, const std::function<Var(Tape&, Var)>& f,
                      const Tensor& x) {
            INFO("op: " << name << " seed " << seed);
            CHECK(grad_check(f, x) < 1e-5);
        };

        ck("add", [&](Tape& t, Var x) { return sum(add(x, t.constant(m34))); }, m34);
        ck("sub", [&](Tape& t, Var x) { return sum(square(sub(x, t.constant(m34)))); }, m34);
        ck("mul", [&](Tape& t, Var x) { return sum(mul(x, t.constant(m34))); }, m34);
        ck("scale", [&](Tape& t, Var x) { return sum(scale(x, -1.7)); }, m34);
        ck("square", [&](Tape& t, Var x) { return sum(square(x)); }, m34);
        ck("neg", [&](Tape& t, Var x) { return sum(square(neg(x))); }, m34);
        ck("matmul_a", [&](Tape& t, Var x) { return sum(square(matmul(x, t.constant(m43)))); },
           m34);
        ck("matmul_b", [&](Tape& t, Var x) { return sum(square(matmul(t.constant(m34), x))); },
           m43);
        ck("transpose", [&](Tape& t, Var x) { return sum(square(transpose(x))); }, m34);
        ck("reshape", [&](Tape& t, Var x) { return sum(square(reshape(x, {4, 3}))); }, m34);
        ck("rows", [&](Tape& t, Var x) { return sum(square(rows(x, 1, 2))); }, m34);
        ck("add_rowvec_m", [&](Tape& t, Var x) { return sum(square(add_rowvec(x, t.constant(v4)))); },
           m34);
        ck("add_rowvec_v",
           [&](Tape& t, Var x) { return sum(square(add_rowvec(t.constant(m34), x))); }, v4);
        ck("mul_rowvec_v",
           [&](Tape& t, Var x) { return sum(square(mul_rowvec(t.constant(m34), x))); }, v4);
        ck("div_rowvec_v",
           [&](Tape& t, Var x) { return sum(square(div_rowvec(t.constant(m34), x))); }, v4pos);
        ck("mul_colvec",
           [&](Tape& t, Var x) { return sum(square(mul_colvec(t.constant(m43), x))); }, v4);
        ck("silu", [&](Tape& t, Var x) { return sum(square(silu(x))); }, m34);
        ck("rmsnorm_x",
           [&](Tape& t, Var x) { return sum(square(rmsnorm(x, t.constant(v4)))); }, m34);
        ck("rmsnorm_g",
           [&](Tape& t, Var x) { return sum(square(rmsnorm(t.constant(m34), x))); }, v4);
        ck("softmax", [&](Tape& t, Var x) {
            return sum(mul(softmax_rows(x), t.constant(m34)));
        }, m34);
        ck("causal_softmax", [&](Tape& t, Var x) {
            return sum(mul(causal_softmax(x), t.constant(sq4)));
        }, sq4);
        ck("mean", [&](Tape& t, Var x) { return mean(square(x)); }, m34);
        ck("gather", [&](Tape& t, Var x) {
            return sum(square(gather_rows(x, {0, 2, 2, 1})));
        }, m34);
        ck("concat", [&](Tape& t, Var x) {
            return sum(square(concat_rows({rows(x, 0, 1), rows(x, 1, 2)})));
        }, m34);
        ck("xent", [&](Tape& t, Var x) { return softmax_xent(x, {1, 3, 0}); }, m34);
        ck("xent_soft", [&](Tape& t, Var x) {
            Tensor probs = softmax_value(m34);
            return xent_soft(x, probs);
        }, m34);
        ck("clamp_min", [&](Tape& t, Var x) { return sum(square(clamp_min(x, 0.25))); }, v4pos);
    }
}

TEST_CASE("backward visits reverse topological order once (diamond graph)") {
    Param x(Tensor::from({2}, {1.5, -0.5}));
    Tape tape;
    Var v = tape.leaf(x);
    Var a = square(v);
    Var b = scale(v, 3.0);
    Var loss = sum(mul(a, b));  // 3 x^3 -> d/dx = 9 x^2
    tape.backward(loss);
    for (Index i = 0; i < 2; ++i)
        CHECK(x.grad[i] == doctest::Approx(9.0 * x.value[i] * x.value[i]).epsilon(1e-12));
}

TEST_CASE("ste_quantize: in-range gradients pass through exactly") {
    Rng rng(7);
    Tensor w({4, 4});
    for (Index i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-1.0, 1.0);

    Param p(w);
    Tape tape;
    Var wv = tape.leaf(p);
    Var loss = sum(mul(ste_quantize(wv, 8, 1), tape.constant(Tensor::full({4, 4}, 0.37))));
    tape.backward(loss);
    // MinMax codes of the tensor's own range are always in [0, 2^c - 1], so
    // the mask is all ones and d(loss)/dw matches the identity path.
    Param q(w);
    Tape tape2;
    Var wv2 = tape2.leaf(q);
    Var loss2 = sum(mul(wv2, tape2.constant(Tensor::full({4, 4}, 0.37))));
    tape2.backward(loss2);
    for (Index i = 0; i < w.numel(); ++i) CHECK(p.grad[i] == q.grad[i]);
}

TEST_CASE("ste gradient is zero outside the clamp range") {
    // Shrink the max-clip so the largest weight lands above 2^c - 1 before
    // clamping; its gradient must vanish while in-range entries pass.
    Tensor w = Tensor::from({1, 4}, {-1.0, 0.0, 0.5, 1.0});
    Tensor gamma = Tensor::full({1}, 0.5);
    Tensor beta = Tensor::full({1}, 1.0);

    Param p(w);
    Tape tape;
    Var wv = tape.leaf(p);
    OmniScales sc = omni_alpha_z(tape, tape.constant(gamma), tape.constant(beta), w, 2,
                                 kPerTensor);
    auto sh = make_omni_shared(w, sc.alpha.value(), sc.z.value(), 2, kPerTensor);
    // alpha = (0.5*1 - (-1))/3 = 0.5, z = 2; u = w/0.5 + 2 = [0, 2, 3, 4].
    CHECK(sh->mask[0] == 1.0);
    CHECK(sh->mask[3] == 0.0);  // pre-clamp code 4 > 3
    Var out = ste_affine_slice(wv, sc.alpha, sc.z, sh, 2, SliceMode::plain);
    tape.backward(sum(out));
    CHECK(p.grad[3] == 0.0);
    CHECK(p.grad[0] == 1.0);

    // Negative side: pre-clamp code below zero also masks to zero.
    Tensor w2 = Tensor::from({1, 3}, {-1.0, 0.0, 1.0});
    Param p2(w2);
    Tape t2;
    Var wv2 = t2.leaf(p2);
    OmniScales sc2 = omni_alpha_z(t2, t2.constant(Tensor::full({1}, 1.0)),
                                  t2.constant(Tensor::full({1}, 0.3)), w2, 2, kPerTensor);
    auto sh2 = make_omni_shared(w2, sc2.alpha.value(), sc2.z.value(), 2, kPerTensor);
    CHECK(sh2->mask[0] == 0.0);  // u = -1/alpha + z < 0
    Var out2 = ste_affine_slice(wv2, sc2.alpha, sc2.z, sh2, 2, SliceMode::plain);
    t2.backward(sum(out2));
    CHECK(p2.grad[0] == 0.0);
}

TEST_CASE("backward on grad-disabled tape is rejected") {
    Tape tape(false);
    Var c = tape.constant(Tensor::scalar(1.0));
    CHECK_THROWS_AS(tape.backward(c), ContractError);
}
