#include "doctest.h"

#include <cmath>

#include "matquant/quant.hpp"

using namespace matquant;

namespace {

// Independent slicing reference straight from the definition, in floating
// point: clamp(round-half-even(q / 2^(c-r)), 0, 2^r - 1) * 2^(c-r), with the
// clamp dropped in extra mode. The production path is integer arithmetic.
int ref_slice(int code, int c, int r, SliceMode mode) {
    double shift = std::pow(2.0, c - r);
    double q = std::nearbyint(static_cast<double>(code) / shift);
    if (mode == SliceMode::plain) q = std::clamp(q, 0.0, std::pow(2.0, r) - 1.0);
    return static_cast<int>(q * shift);
}

QuantizedTensor tensor_with_codes(std::vector<uint16_t> codes, int c) {
    QuantizedTensor q;
    q.shape = {static_cast<Index>(codes.size())};
    q.codes = std::move(codes);
    q.params.c = c;
    q.params.axis = kPerTensor;
    q.params.alpha = Tensor::full({1}, 1.0);
    q.params.z = Tensor::full({1}, 0.0);
    return q;
}

QuantizedTensor all_codes_tensor(int c) {
    std::vector<uint16_t> codes(static_cast<size_t>(1 << c));
    for (size_t i = 0; i < codes.size(); ++i) codes[i] = static_cast<uint16_t>(i);
    return tensor_with_codes(std::move(codes), c);
}

}  // namespace

TEST_CASE("slicing reproduces the worked 8-to-2-bit values") {
    CHECK(slice_code(234, 8, 2, SliceMode::plain) == 192);
    CHECK(slice_code(53, 8, 2, SliceMode::plain) == 64);
    CHECK(slice_code(240, 8, 2, SliceMode::plain) == 192);
    CHECK(slice_code(234, 8, 2, SliceMode::extra) == 256);
    CHECK(slice_code(53, 8, 2, SliceMode::extra) == 64);
    CHECK(slice_code(0, 8, 2, SliceMode::extra) == 0);
    CHECK(slice_code(0, 8, 5, SliceMode::extra) == 0);
}

TEST_CASE("slicing matches the floating-point reference exhaustively") {
    for (int c : {4, 8}) {
        for (int r = 1; r <= c; ++r) {
            for (int code = 0; code < (1 << c); ++code) {
                for (SliceMode mode : {SliceMode::plain, SliceMode::extra}) {
                    INFO("c=" << c << " r=" << r << " code=" << code);
                    CHECK(slice_code(static_cast<uint16_t>(code), c, r, mode) ==
                          ref_slice(code, c, r, mode));
                }
            }
        }
    }
}

TEST_CASE("exhaustive slicing properties: grid, bounds, monotonicity, idempotence") {
    for (int c : {4, 8}) {
        for (int r = 1; r <= c; ++r) {
            const int step = 1 << (c - r);
            int prev_plain = 0, prev_extra = 0;
            for (int code = 0; code < (1 << c); ++code) {
                int plain = slice_code(static_cast<uint16_t>(code), c, r, SliceMode::plain);
                int extra = slice_code(static_cast<uint16_t>(code), c, r, SliceMode::extra);
                CHECK(plain % step == 0);
                CHECK(extra % step == 0);
                CHECK(plain <= ((1 << r) - 1) * step);
                CHECK(extra <= (1 << c));
                CHECK(plain >= prev_plain);
                CHECK(extra >= prev_extra);
                prev_plain = plain;
                prev_extra = extra;
                // Re-slicing a sliced code at the same r is a fixed point.
                CHECK(slice_code(static_cast<uint16_t>(plain), c, r, SliceMode::plain) == plain);
            }
        }
    }
}

TEST_CASE("slice op: contracts and r = c identity") {
    QuantizedTensor q = all_codes_tensor(8);
    QuantizedTensor same = slice(q, SliceSpec{8, 8, SliceMode::plain});
    CHECK(same.codes == q.codes);
    CHECK(same.slice_state.r == 8);

    CHECK_THROWS_AS(slice(q, SliceSpec{8, 9, SliceMode::plain}), ContractError);
    CHECK_THROWS_AS(slice(q, SliceSpec{4, 2, SliceMode::plain}), ContractError);
    QuantizedTensor sliced = slice(q, SliceSpec{8, 2, SliceMode::plain});
    CHECK_THROWS_AS(slice(sliced, SliceSpec{8, 2, SliceMode::plain}), ContractError);
}

TEST_CASE("minmax on endpoints and ties") {
    // w = [0, 3], c=2: alpha 1, z 0, endpoints map to extremes.
    QuantizedTensor q = minmax_quantize(Tensor::from({2}, {0.0, 3.0}), 2);
    CHECK(q.params.alpha[0] == doctest::Approx(1.0));
    CHECK(q.params.z[0] == doctest::Approx(0.0));
    CHECK(q.codes[0] == 0);
    CHECK(q.codes[1] == 3);

    // w = [-1, 0, 1], c=2: alpha 2/3, z 1.5; the middle value sits on the
    // 1.5 tie and rounds to even.
    QuantizedTensor q2 = minmax_quantize(Tensor::from({3}, {-1.0, 0.0, 1.0}), 2);
    CHECK(q2.params.alpha[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-6));
    CHECK(q2.params.z[0] == doctest::Approx(1.5).epsilon(1e-6));
    CHECK(q2.codes[0] == 0);
    CHECK(q2.codes[1] == 2);
    CHECK(q2.codes[2] == 3);

    Tensor deq = dequantize(q2);
    CHECK(deq[0] == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(deq[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
    CHECK(deq[2] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("constant channel never divides by zero and round-trips") {
    QuantizedTensor q = minmax_quantize(Tensor::full({4}, 5.0), 4);
    for (uint16_t code : q.codes) CHECK(code == 0);
    Tensor deq = dequantize(q);
    for (Index i = 0; i < 4; ++i) CHECK(deq[i] == doctest::Approx(5.0).epsilon(1e-6));

    CHECK_THROWS_AS(minmax_quantize(Tensor::full({2}, 1.0), 1), ContractError);
    CHECK_THROWS_AS(minmax_quantize(Tensor::full({2}, 1.0), 9), ContractError);
}

TEST_CASE("minmax round trip on grid values") {
    Rng rng(11);
    for (int c : {2, 4, 8}) {
        const int levels = (1 << c) - 1;
        Tensor w({64});
        for (Index i = 0; i < w.numel(); ++i)
            w[i] = -1.0 + 2.0 * static_cast<double>(rng.next_below(levels + 1)) / levels;
        // Force the range endpoints onto the grid.
        w[0] = -1.0;
        w[1] = 1.0;
        Tensor deq = dequantize(minmax_quantize(w, c));
        for (Index i = 0; i < w.numel(); ++i)
            CHECK(deq[i] == doctest::Approx(w[i]).epsilon(1e-6));
    }
}

TEST_CASE("per-channel quantization uses one scale per output column") {
    Tensor w = Tensor::from({2, 2}, {0.0, 10.0, 3.0, 30.0});
    QuantizedTensor q = minmax_quantize(w, 2, 1);
    CHECK(q.params.channels() == 2);
    CHECK(q.params.alpha[0] == doctest::Approx(1.0));
    CHECK(q.params.alpha[1] == doctest::Approx(20.0 / 3.0).epsilon(1e-6));
    CHECK(q.codes[0] == 0);
    CHECK(q.codes[2] == 3);
}

TEST_CASE("omniquant reduces to minmax at gamma = beta = 1") {
    Rng rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
        Index n = 4 + static_cast<Index>(rng.next_below(13));
        Tensor w({n});
        for (Index i = 0; i < n; ++i) w[i] = rng.uniform(-2.0, 2.0);
        int c = 2 + static_cast<int>(rng.next_below(7));
        QuantizedTensor mm = minmax_quantize(w, c);
        QuantizedTensor om = omni_quantize(w, c, Tensor::full({1}, 1.0), Tensor::full({1}, 1.0));
        CHECK(mm.codes == om.codes);
        CHECK(mm.params.alpha[0] == om.params.alpha[0]);
        CHECK(mm.params.z[0] == om.params.z[0]);
    }
}

TEST_CASE("omniquant hand example gamma=0.5") {
    // alpha = (0.5*1 - 1*(-1))/3 = 0.5, z = 2, codes clamp([0,2,4]) = [0,2,3].
    QuantizedTensor q = omni_quantize(Tensor::from({3}, {-1.0, 0.0, 1.0}), 2,
                                      Tensor::full({1}, 0.5), Tensor::full({1}, 1.0));
    CHECK(q.params.alpha[0] == doctest::Approx(0.5));
    CHECK(q.params.z[0] == doctest::Approx(2.0));
    CHECK(q.codes[0] == 0);
    CHECK(q.codes[1] == 2);
    CHECK(q.codes[2] == 3);
}

TEST_CASE("omniquant inverted range is guarded and counted") {
    reset_range_collapse_count();
    QuantizedTensor q = omni_quantize(Tensor::from({2}, {-1.0, 1.0}), 2,
                                      Tensor::full({1}, 0.1), Tensor::full({1}, -1.0));
    CHECK(range_collapse_count() == 1);
    for (Index i = 0; i < q.params.channels(); ++i) CHECK(q.params.alpha[i] > 0.0);
    reset_range_collapse_count();
}

TEST_CASE("d alpha / d gamma equals max(w)/(2^c - 1) and matches finite differences") {
    Tensor w = Tensor::from({5}, {-1.3, 0.2, 0.9, 1.7, -0.4});
    const int c = 4;
    Param gamma(Tensor::full({1}, 0.8));
    Param beta(Tensor::full({1}, 1.1));

    Tape tape;
    Var g = tape.leaf(gamma);
    Var b = tape.leaf(beta);
    OmniScales sc = omni_alpha_z(tape, g, b, w, c, kPerTensor);
    tape.backward(sum(sc.alpha));
    CHECK(gamma.grad[0] == doctest::Approx(1.7 / 15.0).epsilon(1e-12));

    // Finite differences on the dequantized output wrt gamma, nudged off
    // rounding boundaries.
    auto deq_sum = [&](double gv) {
        Tape t(false);
        OmniScales s2 = omni_alpha_z(t, t.constant(Tensor::full({1}, gv)),
                                     t.constant(beta.value), w, c, kPerTensor);
        auto sh = make_omni_shared(w, s2.alpha.value(), s2.z.value(), c, kPerTensor);
        Var out = ste_affine_slice(t.constant(w), s2.alpha, s2.z, sh, c, SliceMode::plain);
        return sum(out).value()[0];
    };
    gamma.zero_grad();
    beta.zero_grad();
    Tape t3;
    Var g3 = t3.leaf(gamma);
    Var b3 = t3.leaf(beta);
    OmniScales s3 = omni_alpha_z(t3, g3, b3, w, c, kPerTensor);
    auto sh3 = make_omni_shared(w, s3.alpha.value(), s3.z.value(), c, kPerTensor);
    Var out3 = ste_affine_slice(t3.constant(w), s3.alpha, s3.z, sh3, c, SliceMode::plain);
    t3.backward(sum(out3));
    const double h = 1e-4;
    double numeric = (deq_sum(0.8 + h) - deq_sum(0.8 - h)) / (2.0 * h);
    CHECK(gamma.grad[0] == doctest::Approx(numeric).epsilon(1e-3));
}

TEST_CASE("dequantize keeps the source scales after slicing") {
    Rng rng(5);
    Tensor w({32});
    for (Index i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-1.5, 1.5);
    QuantizedTensor q8 = minmax_quantize(w, 8);
    QuantizedTensor q2 = slice(q8, SliceSpec{8, 2, SliceMode::plain});
    CHECK(q2.params.alpha[0] == q8.params.alpha[0]);
    CHECK(q2.params.z[0] == q8.params.z[0]);
    Tensor deq = dequantize(q2);
    // Every dequantized value lies on the 4-point grid alpha*(k*64 - z).
    for (Index i = 0; i < deq.numel(); ++i) {
        bool on_grid = false;
        for (int k = 0; k < 4; ++k) {
            double grid = q8.params.alpha[0] * (k * 64.0 - q8.params.z[0]);
            if (std::abs(grid - deq[i]) < 1e-12) on_grid = true;
        }
        CHECK(on_grid);
    }
}

TEST_CASE("code histogram: exact masses from the exhaustive oracle") {
    // Oracle: enumerate every 8-bit code and bucket its plain 2-bit slice.
    std::vector<int64_t> expected(4, 0);
    for (int code = 0; code < 256; ++code)
        expected[static_cast<size_t>(ref_slice(code, 8, 2, SliceMode::plain) / 64)] += 1;

    QuantizedTensor q = all_codes_tensor(8);
    CHECK(code_histogram(q, 2) == expected);

    // Extremes: all-zero codes put all mass in bucket 0; grid points one each.
    QuantizedTensor zeros = tensor_with_codes(std::vector<uint16_t>(16, 0), 8);
    auto hz = code_histogram(zeros, 2);
    CHECK(hz[0] == 16);
    CHECK(hz[1] + hz[2] + hz[3] == 0);

    QuantizedTensor grid = tensor_with_codes({0, 64, 128, 192}, 8);
    CHECK(code_histogram(grid, 2) == std::vector<int64_t>{1, 1, 1, 1});
}

TEST_CASE("histogram of an extra-sliced tensor has an overflow bucket") {
    QuantizedTensor q = all_codes_tensor(8);
    QuantizedTensor qe = slice_extra(q, SliceSpec{8, 2, SliceMode::extra});
    auto counts = code_histogram(qe, 2);
    REQUIRE(counts.size() == 5);
    std::vector<int64_t> expected(5, 0);
    for (int code = 0; code < 256; ++code)
        expected[static_cast<size_t>(ref_slice(code, 8, 2, SliceMode::extra) / 64)] += 1;
    CHECK(counts == expected);
    int64_t sum = 0;
    for (int64_t v : counts) sum += v;
    CHECK(sum == 256);
}

TEST_CASE("overflow fraction: brute-force value on uniform codes") {
    // Oracle over all 256 codes: the top 32 (224..255) round up to 4.
    int64_t overflow = 0;
    for (int code = 0; code < 256; ++code)
        if (ref_slice(code, 8, 2, SliceMode::extra) == 256) ++overflow;
    CHECK(overflow == 32);

    QuantizedTensor q = slice_extra(all_codes_tensor(8), SliceSpec{8, 2, SliceMode::extra});
    CHECK(overflow_fraction(q) == 32.0 / 256.0);

    QuantizedTensor all255 = tensor_with_codes(std::vector<uint16_t>(8, 255), 8);
    QuantizedTensor e = slice_extra(all255, SliceSpec{8, 2, SliceMode::extra});
    CHECK(overflow_fraction(e) == 1.0);

    // Nothing rounds past the top when codes stay below 2^c - 2^(c-r-1).
    QuantizedTensor low = tensor_with_codes({0, 50, 100, 150, 200, 223}, 8);
    QuantizedTensor le = slice_extra(low, SliceSpec{8, 2, SliceMode::extra});
    CHECK(overflow_fraction(le) == 0.0);

    QuantizedTensor plain = slice(all_codes_tensor(8), SliceSpec{8, 2, SliceMode::plain});
    CHECK_THROWS_AS(overflow_fraction(plain), ContractError);
}

TEST_CASE("apply_affine_aux identities") {
    Rng rng(17);
    auto rand_tensor = [&](std::vector<Index> shape) {
        Tensor t(std::move(shape));
        for (Index i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-2.0, 2.0);
        return t;
    };
    Tensor X = rand_tensor({3, 4});
    Tensor W = rand_tensor({4, 2});
    Tensor B = rand_tensor({2});
    auto identity = [](Var v) { return v; };

    auto run = [&](const Tensor& delta, const Tensor& s) {
        Tape tape(false);
        return apply_affine_aux(tape.constant(X), tape.constant(W), tape.constant(B),
                                tape.constant(delta), tape.constant(s), identity)
            .value();
    };
    Tape ref_tape(false);
    Tensor expect =
        add_rowvec(matmul(ref_tape.constant(X), ref_tape.constant(W)), ref_tape.constant(B))
            .value();

    // delta = 0, s = 1 reduces to XW + b exactly.
    Tensor out = run(Tensor::zeros({4}), Tensor::full({4}, 1.0));
    for (Index i = 0; i < out.numel(); ++i) CHECK(out[i] == expect[i]);

    // s = 2 cancels with the identity quantizer.
    Tensor out2 = run(Tensor::zeros({4}), Tensor::full({4}, 2.0));
    for (Index i = 0; i < out2.numel(); ++i)
        CHECK(out2[i] == doctest::Approx(expect[i]).epsilon(1e-12));

    // The shift cancels algebraically: (X - d)W + dW = XW.
    Tensor delta = Tensor::from({4}, {1.0, 0.0, -0.5, 2.0});
    Tensor out3 = run(delta, Tensor::full({4}, 1.0));
    for (Index i = 0; i < out3.numel(); ++i)
        CHECK(out3[i] == doctest::Approx(expect[i]).epsilon(1e-12));

    // Random delta and positive s with the identity quantizer stay within
    // accumulated rounding of XW + b.
    Tensor s = rand_tensor({4});
    s.array() = s.array().abs() + 0.25;
    Tensor out4 = run(rand_tensor({4}), s);
    for (Index i = 0; i < out4.numel(); ++i)
        CHECK(out4[i] == doctest::Approx(expect[i]).epsilon(1e-6));

    Tensor bad_s = Tensor::full({4}, 1.0);
    bad_s[2] = 0.0;
    CHECK_THROWS_AS(run(Tensor::zeros({4}), bad_s), ContractError);
}

TEST_CASE("slicing always starts from the c-bit source codes") {
    // Double rounding differs from direct slicing; the API forbids chaining.
    QuantizedTensor q8 = all_codes_tensor(8);
    QuantizedTensor q4 = slice(q8, SliceSpec{8, 4, SliceMode::plain});
    CHECK_THROWS_AS(slice(q4, SliceSpec{8, 2, SliceMode::plain}), ContractError);
}
