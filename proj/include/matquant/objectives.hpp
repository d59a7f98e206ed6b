#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "matquant/model.hpp"
#include "matquant/quant.hpp"

namespace matquant {

enum class BaseAlgo { qat, block_recon };
enum class DistillCombine { standalone, with_ground_truth };

// "teacher -> student": the student slice is supervised by the (stop-
// gradient) teacher slice, optionally mixed equally with the ground truth.
struct DistillEdge {
    int teacher_bits = 8;
    int student_bits = 2;
    DistillCombine combine = DistillCombine::standalone;
    double lambda = 1.0;
};

struct MatQuantConfig {
    int c = 8;
    std::vector<int> precisions = {8, 4, 2};  // R, ordered
    std::map<int, double> lambdas;            // empty entries fall back to defaults
    SliceMode slice_mode = SliceMode::plain;
    BaseAlgo base = BaseAlgo::qat;
    std::vector<DistillEdge> codistill;

    void validate() const;
    double lambda_for(int r) const;

    // Config-string grammar: "[8,4,2]", "[8,4,8->2]", "[8,4,2,8->4;2]".
    // A bare number adds a precision; "t->s1;s2" adds one edge per student.
    // The UTF-8 arrow is accepted too.
    static MatQuantConfig from_string(const std::string& grammar);
    std::string to_string() const;
};

// ---- QAT-style losses (cross-entropy through the quantized forward) ----

// Eq-2-style loss: cross-entropy of the forward pass with quant-scope
// weights quantize-dequantized at c bits; gradients reach weights via STE.
Var qat_loss(Tape& tape, ToyModel& model, const Batch& batch, int c);

// Weighted multi-precision loss: one shared c-bit quantization per weight
// per step, sliced to each r in R, plus co-distillation terms.
Var matquant_qat_loss(Tape& tape, ToyModel& model, const Batch& batch,
                      const MatQuantConfig& cfg);

// MatQuant with R = {r}: all c bits train to serve the r-bit slice.
Var single_precision_loss(Tape& tape, ToyModel& model, const Batch& batch, int r, int c);

// Cross-entropy of the student against the teacher's softmax (teacher is a
// value, not a graph node); with_ground_truth mixes the label loss equally.
Var codistill_term(Tape& tape, const Tensor& teacher_logits, Var student_logits,
                   const std::vector<int>& targets, DistillCombine combine);

// ---- block-reconstruction losses (frozen weights, learnable aux) ----

// Mean squared error between layer_forward under `hooks` and y_ref.
Var layer_recon_loss(Tape& tape, const ToyModel& model, int layer, const Tensor& x_l,
                     const Tensor& y_ref, const ForwardHooks& hooks);

// Reconstruction form of the multi-precision objective for one layer:
// weights frozen, gradients reach only gamma/beta/delta/s. Distill edges use
// the higher-precision slice's layer output as an L2 target.
Var matquant_recon_loss(Tape& tape, const ToyModel& model, int layer, const Tensor& x_l,
                        const Tensor& y_ref, OmniAux& aux, const MatQuantConfig& cfg);

// Single-precision reconstruction loss at bit-width c (no slicing).
Var block_recon_loss(Tape& tape, const ToyModel& model, int layer, const Tensor& x_l,
                     const Tensor& y_ref, OmniAux& aux, int c);

// ---- materialization for evaluation and serialization ----

// Canonical integer quantization of the quant-scope weights.
std::map<std::string, QuantizedTensor> materialize_qat(const ToyModel& model, int c);

struct OmniMaterialized {
    std::map<std::string, QuantizedTensor> qweights;  // codes of W*s with learned clips
    std::map<std::string, FoldedProjAux> folds;       // per FFN projection
};
OmniMaterialized materialize_omniquant(const ToyModel& model, const OmniAux& aux, int c);

}  // namespace matquant
