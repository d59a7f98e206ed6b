#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "matquant/autodiff.hpp"
#include "matquant/tensor.hpp"

namespace matquant {

// Channel axis value meaning one scale for the whole tensor.
inline constexpr int kPerTensor = -1;

inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 8;

enum class SliceMode : uint8_t { plain = 0, extra = 1 };

struct SliceSpec {
    int c = 8;
    int r = 8;
    SliceMode mode = SliceMode::plain;
};

// Result of slicing; r == 0 means "not sliced".
struct SliceState {
    int r = 0;
    SliceMode mode = SliceMode::plain;
    bool active() const { return r > 0; }
};

// Dequantization parameters for one tensor. alpha and z hold one entry per
// channel and are canonicalized to 32-bit float values at creation so that
// in-memory dequantization matches the packed checkpoint bit for bit.
struct QuantParams {
    Tensor alpha;  // > 0 per channel
    Tensor z;      // real zero point per channel
    int c = 8;     // bit-width, in [2, 8]
    int axis = kPerTensor;
    Tensor gamma;  // learnable max-clip scale; empty means all ones
    Tensor beta;   // learnable min-clip scale; empty means all ones

    Index channels() const { return alpha.numel(); }
};

// Integer codes plus their dequantization parameters. Codes fit c bits,
// except after extra-precision slicing where the single overflow bucket
// value 2^c may appear.
struct QuantizedTensor {
    std::vector<Index> shape;
    std::vector<uint16_t> codes;
    QuantParams params;
    SliceState slice_state;

    Index numel() const { return static_cast<Index>(codes.size()); }
};

// Number of channels the (shape, axis) pair induces.
Index channel_count(const std::vector<Index>& shape, int axis);
// Channel index of flat element i.
Index channel_of(const std::vector<Index>& shape, int axis, Index i);

// MinMax quantizer: alpha = (max-min)/(2^c-1), z = -min/alpha per channel.
QuantizedTensor minmax_quantize(const Tensor& w, int c, int axis = kPerTensor);

// MinMax with learnable clipping scales gamma/beta (per channel or scalar):
// alpha = (gamma*max - beta*min)/(2^c-1), z = -beta*min/alpha. An inverted
// range (gamma*max <= beta*min) is epsilon-guarded and counted.
QuantizedTensor omni_quantize(const Tensor& w, int c, const Tensor& gamma, const Tensor& beta,
                              int axis = kPerTensor);

// Slices the r most significant bits: clamp(round(q / 2^(c-r)), 0, 2^r-1) * 2^(c-r).
QuantizedTensor slice(const QuantizedTensor& q, const SliceSpec& spec);
// No-clamp variant admitting the overflow bucket 2^c.
QuantizedTensor slice_extra(const QuantizedTensor& q, const SliceSpec& spec);

// alpha * (code - z), always with the source c-bit parameters (nested models
// share scales).
Tensor dequantize(const QuantizedTensor& q);

// Bucket counts at bit-width r; bucket k holds sliced value k*2^(c-r), the
// overflow bucket (extra mode only) is indexed 2^r.
std::vector<int64_t> code_histogram(const QuantizedTensor& q, int at_bits);

// Fraction of codes in the overflow bucket of an extra-sliced tensor.
double overflow_fraction(const QuantizedTensor& q);

// Integer slicing primitive on a single code (round-half-even, then clamp
// unless extra). Exposed for tests and the packing layer.
uint16_t slice_code(uint16_t code, int c, int r, SliceMode mode);

// Running count of epsilon-guarded inverted ranges seen by omni_quantize.
int64_t range_collapse_count();
void reset_range_collapse_count();

// ---- autodiff integration ----

// One canonical c-bit quantization of a weight tensor, shared by the per-
// precision slices of a single training step.
struct SharedQuant {
    QuantizedTensor q;
    Tensor mask;  // 1 where the pre-clamp affine code w/alpha + z is in [0, 2^c-1]
};

std::shared_ptr<SharedQuant> make_shared_quant(const Tensor& w, int c, int axis);

// Forward: dequantize(slice(q, r, mode)). Backward: clipped straight-through
// (upstream gradient where mask is 1, zero elsewhere).
Var ste_slice_shared(Var w, std::shared_ptr<SharedQuant> sq, int r, SliceMode mode);

// Self-scaling MinMax quantize-dequantize with clipped STE. r == 0 means no
// slicing (quantize at c only).
Var ste_quantize(Var w, int c, int axis, int r = 0, SliceMode mode = SliceMode::plain);

// Learnable-quantizer building blocks: per-channel alpha and z as tape
// expressions of gamma and beta (w range statistics are step constants).
struct OmniScales {
    Var alpha;
    Var z;
};
OmniScales omni_alpha_z(Tape& tape, Var gamma, Var beta, const Tensor& w, int c, int axis);

// Shared per-step code bundle for the learnable quantizer.
struct OmniShared {
    std::vector<uint16_t> codes;  // clamped c-bit codes
    Tensor mask;
    int c = 8;
    int axis = kPerTensor;
    std::vector<Index> shape;
};
std::shared_ptr<OmniShared> make_omni_shared(const Tensor& w, const Tensor& alpha, const Tensor& z,
                                             int c, int axis);

// Forward: alpha * (slice(codes, r, mode) - z). Backward: STE gradients to w,
// alpha and z (treating round/clamp/slice as identity inside the mask).
Var ste_affine_slice(Var w, Var alpha, Var z, std::shared_ptr<OmniShared> sh, int r,
                     SliceMode mode);

// FFN affine transform with learnable shift/scale:
//   ((X - delta) / s) * qfn(W * s) + b + delta * W
// where s scales W's rows and divides X's columns. Throws if any s <= 0.
Var apply_affine_aux(Var X, Var W, Var b, Var delta, Var s,
                     const std::function<Var(Var)>& qfn);

}  // namespace matquant
