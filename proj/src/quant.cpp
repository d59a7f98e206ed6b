#include "matquant/quant.hpp"

#include <atomic>
#include <cmath>

namespace matquant {

namespace {

std::atomic<int64_t> g_range_collapse{0};

constexpr Real kAlphaFloor = 1e-12;

Real to_f32(Real x) { return static_cast<Real>(static_cast<float>(x)); }

Real round_half_even(Real x) { return std::nearbyint(x); }

void require_bits(int c) {
    if (c < kMinBits || c > kMaxBits)
        throw ContractError("bit-width must be in [2, 8], got " + std::to_string(c));
}

void require_slice_args(const QuantizedTensor& q, const SliceSpec& spec) {
    if (spec.c != q.params.c) throw ContractError("slice: spec.c does not match tensor bit-width");
    if (q.slice_state.active()) throw ContractError("slice: tensor already sliced");
    if (spec.r <= 0 || spec.r > spec.c) throw ContractError("slice: need 0 < r <= c");
}

// Per-channel extrema over the flat tensor.
void channel_min_max(const Tensor& w, int axis, ArrayX& mins, ArrayX& maxs) {
    Index nch = channel_count(w.shape(), axis);
    mins = ArrayX::Constant(nch, std::numeric_limits<Real>::infinity());
    maxs = ArrayX::Constant(nch, -std::numeric_limits<Real>::infinity());
    for (Index i = 0; i < w.numel(); ++i) {
        Index ch = channel_of(w.shape(), axis, i);
        mins[ch] = std::min(mins[ch], w[i]);
        maxs[ch] = std::max(maxs[ch], w[i]);
    }
}

}  // namespace

Index channel_count(const std::vector<Index>& shape, int axis) {
    if (axis == kPerTensor) return 1;
    if (shape.size() != 2) throw ContractError("per-channel quantization expects a rank-2 tensor");
    if (axis != 0 && axis != 1) throw ContractError("channel axis must be 0, 1 or per-tensor");
    return shape[static_cast<size_t>(axis)];
}

Index channel_of(const std::vector<Index>& shape, int axis, Index i) {
    if (axis == kPerTensor) return 0;
    Index cols = shape[1];
    return axis == 1 ? i % cols : i / cols;
}

int64_t range_collapse_count() { return g_range_collapse.load(); }
void reset_range_collapse_count() { g_range_collapse.store(0); }

namespace {

// Shared core of minmax_quantize / omni_quantize. gamma/beta empty => ones.
QuantizedTensor affine_quantize(const Tensor& w, int c, const Tensor& gamma, const Tensor& beta,
                                int axis, bool count_collapse) {
    require_bits(c);
    if (w.numel() == 0) throw ContractError("quantize: empty tensor");
    if (!w.all_finite()) throw NumericError("quantize: non-finite input");

    Index nch = channel_count(w.shape(), axis);
    auto pick = [nch](const Tensor& t, Index ch) -> Real {
        if (t.numel() == 0) return 1.0;
        if (t.numel() == 1) return t[0];
        if (t.numel() != nch) throw DimensionError("gamma/beta must be scalar or per-channel");
        return t[ch];
    };

    ArrayX mins, maxs;
    channel_min_max(w, axis, mins, maxs);

    const Real levels = static_cast<Real>((1 << c) - 1);
    QuantParams p;
    p.c = c;
    p.axis = axis;
    p.alpha = Tensor::zeros({nch});
    p.z = Tensor::zeros({nch});
    if (gamma.numel() != 0) p.gamma = gamma;
    if (beta.numel() != 0) p.beta = beta;

    std::vector<char> degenerate(static_cast<size_t>(nch), 0);
    for (Index ch = 0; ch < nch; ++ch) {
        Real g = pick(gamma, ch);
        Real b = pick(beta, ch);
        Real raw = (g * maxs[ch] - b * mins[ch]) / levels;
        if (count_collapse && raw <= 0.0) g_range_collapse.fetch_add(1);
        degenerate[static_cast<size_t>(ch)] = raw == 0.0;
        Real alpha = to_f32(std::max(raw, kAlphaFloor));
        Real z = to_f32(-b * mins[ch] / alpha);
        p.alpha[ch] = alpha;
        p.z[ch] = z;
    }

    QuantizedTensor q;
    q.shape = w.shape();
    q.params = std::move(p);
    q.codes.resize(static_cast<size_t>(w.numel()));
    const Real top = levels;
    for (Index i = 0; i < w.numel(); ++i) {
        Index ch = channel_of(w.shape(), axis, i);
        // A constant channel maps to code 0 and dequantizes back to the
        // constant through z; computing the affine code with the guarded
        // alpha would amplify float32 rounding of z into garbage codes.
        if (degenerate[static_cast<size_t>(ch)]) {
            q.codes[static_cast<size_t>(i)] = 0;
            continue;
        }
        Real u = w[i] / q.params.alpha[ch] + q.params.z[ch];
        Real code = std::clamp(round_half_even(u), 0.0, top);
        q.codes[static_cast<size_t>(i)] = static_cast<uint16_t>(code);
    }
    return q;
}

}  // namespace

QuantizedTensor minmax_quantize(const Tensor& w, int c, int axis) {
    return affine_quantize(w, c, Tensor(), Tensor(), axis, false);
}

QuantizedTensor omni_quantize(const Tensor& w, int c, const Tensor& gamma, const Tensor& beta,
                              int axis) {
    return affine_quantize(w, c, gamma, beta, axis, true);
}

uint16_t slice_code(uint16_t code, int c, int r, SliceMode mode) {
    if (r == c) return code;
    const uint32_t shift = 1u << (c - r);
    uint32_t q = code / shift;
    uint32_t rem = code % shift;
    uint32_t half = shift / 2;
    if (rem > half || (rem == half && (q & 1u)))
        ++q;  // round half to even
    if (mode == SliceMode::plain) {
        uint32_t top = (1u << r) - 1;
        if (q > top) q = top;
    }
    return static_cast<uint16_t>(q * shift);
}

namespace {

QuantizedTensor slice_impl(const QuantizedTensor& q, const SliceSpec& spec, SliceMode mode) {
    require_slice_args(q, spec);
    QuantizedTensor out = q;
    for (auto& code : out.codes) code = slice_code(code, spec.c, spec.r, mode);
    out.slice_state = SliceState{spec.r, mode};
    return out;
}

}  // namespace

QuantizedTensor slice(const QuantizedTensor& q, const SliceSpec& spec) {
    return slice_impl(q, spec, SliceMode::plain);
}

QuantizedTensor slice_extra(const QuantizedTensor& q, const SliceSpec& spec) {
    return slice_impl(q, spec, SliceMode::extra);
}

Tensor dequantize(const QuantizedTensor& q) {
    Tensor out(q.shape);
    for (Index i = 0; i < out.numel(); ++i) {
        Index ch = channel_of(q.shape, q.params.axis, i);
        out[i] = q.params.alpha[ch] *
                 (static_cast<Real>(q.codes[static_cast<size_t>(i)]) - q.params.z[ch]);
    }
    return out;
}

std::vector<int64_t> code_histogram(const QuantizedTensor& q, int at_bits) {
    int c = q.params.c;
    if (at_bits <= 0 || at_bits > c) throw ContractError("code_histogram: need 0 < r <= c");
    bool extra = q.slice_state.active() && q.slice_state.mode == SliceMode::extra;
    if (q.slice_state.active() && q.slice_state.r != at_bits)
        throw ContractError("code_histogram: tensor already sliced at a different bit-width");
    std::vector<int64_t> counts(static_cast<size_t>(1 << at_bits) + (extra ? 1 : 0), 0);
    const int shift = c - at_bits;
    for (uint16_t code : q.codes) {
        uint16_t sliced =
            q.slice_state.active() ? code : slice_code(code, c, at_bits, SliceMode::plain);
        counts[static_cast<size_t>(sliced >> shift)] += 1;
    }
    return counts;
}

double overflow_fraction(const QuantizedTensor& q) {
    if (!q.slice_state.active() || q.slice_state.mode != SliceMode::extra)
        throw ContractError("overflow_fraction: tensor is not extra-precision sliced");
    const uint16_t top = static_cast<uint16_t>(1u << q.params.c);
    int64_t n = 0;
    for (uint16_t code : q.codes) n += (code == top);
    return static_cast<double>(n) / static_cast<double>(q.codes.size());
}

// ---- autodiff integration ----

namespace {

// Slack in code units: the canonical float32 scales perturb the pre-clamp
// code of the range extremes by a few 1e-5, which must not count as clipped.
constexpr Real kMaskSlack = 1e-3;

Tensor in_range_mask(const Tensor& w, const Tensor& alpha, const Tensor& z, int c, int axis) {
    Tensor mask(w.shape());
    const Real top = static_cast<Real>((1 << c) - 1);
    for (Index i = 0; i < w.numel(); ++i) {
        Index ch = channel_of(w.shape(), axis, i);
        Real u = w[i] / alpha[ch] + z[ch];
        mask[i] = (u >= -kMaskSlack && u <= top + kMaskSlack) ? 1.0 : 0.0;
    }
    return mask;
}

Tensor dequant_sliced(const std::vector<uint16_t>& codes, const std::vector<Index>& shape,
                      const Tensor& alpha, const Tensor& z, int c, int axis, int r,
                      SliceMode mode) {
    Tensor out(shape);
    for (Index i = 0; i < out.numel(); ++i) {
        Index ch = channel_of(shape, axis, i);
        uint16_t s = slice_code(codes[static_cast<size_t>(i)], c, r, mode);
        out[i] = alpha[ch] * (static_cast<Real>(s) - z[ch]);
    }
    return out;
}

}  // namespace

std::shared_ptr<SharedQuant> make_shared_quant(const Tensor& w, int c, int axis) {
    auto sq = std::make_shared<SharedQuant>();
    sq->q = minmax_quantize(w, c, axis);
    sq->mask = in_range_mask(w, sq->q.params.alpha, sq->q.params.z, c, axis);
    return sq;
}

Var ste_slice_shared(Var w, std::shared_ptr<SharedQuant> sq, int r, SliceMode mode) {
    const QuantParams& p = sq->q.params;
    if (r <= 0 || r > p.c) throw ContractError("ste_slice_shared: need 0 < r <= c");
    Tensor out = dequant_sliced(sq->q.codes, sq->q.shape, p.alpha, p.z, p.c, p.axis, r, mode);
    int wi = w.id;
    return w.tape->push("ste_quantize", std::move(out), [wi, sq](Tape& t, const Tensor& g) {
        t.accum_grad(wi, Tensor(g.shape(), g.array() * sq->mask.array()));
    });
}

Var ste_quantize(Var w, int c, int axis, int r, SliceMode mode) {
    auto sq = make_shared_quant(w.value(), c, axis);
    return ste_slice_shared(w, sq, r == 0 ? c : r, mode);
}

OmniScales omni_alpha_z(Tape& tape, Var gamma, Var beta, const Tensor& w, int c, int axis) {
    require_bits(c);
    ArrayX mins, maxs;
    channel_min_max(w, axis, mins, maxs);
    Index nch = mins.size();
    if (gamma.value().numel() != nch || beta.value().numel() != nch)
        throw DimensionError("omni_alpha_z: gamma/beta must have one entry per channel");
    Var vmax = tape.constant(Tensor({nch}, maxs));
    Var vmin = tape.constant(Tensor({nch}, mins));
    Real inv_levels = 1.0 / static_cast<Real>((1 << c) - 1);
    Var raw = scale(sub(mul(gamma, vmax), mul(beta, vmin)), inv_levels);
    if ((raw.value().array() <= 0.0).any()) g_range_collapse.fetch_add(1);
    Var alpha = clamp_min(raw, kAlphaFloor);
    Var z = neg(div_rowvec(mul(beta, vmin), alpha));
    return {alpha, z};
}

std::shared_ptr<OmniShared> make_omni_shared(const Tensor& w, const Tensor& alpha, const Tensor& z,
                                             int c, int axis) {
    require_bits(c);
    auto sh = std::make_shared<OmniShared>();
    sh->c = c;
    sh->axis = axis;
    sh->shape = w.shape();
    sh->codes.resize(static_cast<size_t>(w.numel()));
    const Real top = static_cast<Real>((1 << c) - 1);
    sh->mask = in_range_mask(w, alpha, z, c, axis);
    for (Index i = 0; i < w.numel(); ++i) {
        Index ch = channel_of(w.shape(), axis, i);
        Real u = w[i] / alpha[ch] + z[ch];
        sh->codes[static_cast<size_t>(i)] =
            static_cast<uint16_t>(std::clamp(round_half_even(u), 0.0, top));
    }
    return sh;
}

Var ste_affine_slice(Var w, Var alpha, Var z, std::shared_ptr<OmniShared> sh, int r,
                     SliceMode mode) {
    if (r <= 0 || r > sh->c) throw ContractError("ste_affine_slice: need 0 < r <= c");
    const Tensor& av = alpha.value();
    const Tensor& zv = z.value();
    Tensor out = dequant_sliced(sh->codes, sh->shape, av, zv, sh->c, sh->axis, r, mode);

    auto sliced = std::make_shared<std::vector<uint16_t>>(sh->codes);
    for (auto& code : *sliced) code = slice_code(code, sh->c, r, mode);

    int wi = w.id, ai = alpha.id, zi = z.id;
    return w.tape->push(
        "ste_affine_slice", std::move(out), [wi, ai, zi, sh, sliced](Tape& t, const Tensor& g) {
            const Tensor& wv = t.value(wi);
            const Tensor& av = t.value(ai);
            const Tensor& zv = t.value(zi);
            Index nch = av.numel();
            Tensor ga = Tensor::zeros({nch});
            Tensor gz = Tensor::zeros({nch});
            Tensor gw(wv.shape());
            // out_i = alpha_ch * (qs_i - z_ch). The weight path uses clipped
            // STE (pass-through inside the mask). The scale path uses the
            // exact piecewise derivative: codes are locally constant in
            // alpha and z, so moving gamma/beta moves the dequantization
            // grid. This matches finite differences away from rounding
            // boundaries, which the pass-through-round variant does not.
            //   d out / d w     = mask
            //   d out / d alpha = qs - z
            //   d out / d z     = -alpha
            for (Index i = 0; i < wv.numel(); ++i) {
                Index ch = channel_of(sh->shape, sh->axis, i);
                Real qs = static_cast<Real>((*sliced)[static_cast<size_t>(i)]);
                Real gi = g[i];
                gw[i] = gi * sh->mask[i];
                ga[ch] += gi * (qs - zv[ch]);
                gz[ch] += -gi * av[ch];
            }
            t.accum_grad(wi, gw);
            t.accum_grad(ai, ga);
            t.accum_grad(zi, gz);
        });
}

Var apply_affine_aux(Var X, Var W, Var b, Var delta, Var s,
                     const std::function<Var(Var)>& qfn) {
    if ((s.value().array() <= 0.0).any())
        throw ContractError("apply_affine_aux: s must be strictly positive");
    Var xs = div_rowvec(add_rowvec(X, neg(delta)), s);
    Var ws = mul_colvec(W, s);
    Var main = matmul(xs, qfn(ws));
    // delta * W as a [1, d] x [d, o] product folded into the bias path
    Var dw = matmul(reshape(delta, {1, delta.value().dim(0)}), W);
    Var out = add_rowvec(main, reshape(dw, {dw.value().dim(1)}));
    return add_rowvec(out, b);
}

}  // namespace matquant
