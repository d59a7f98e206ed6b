#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "matquant/autodiff.hpp"
#include "matquant/data.hpp"
#include "matquant/tensor.hpp"

namespace matquant {

enum class QuantScope { ffn_only, ffn_and_attention };

struct ModelConfig {
    Index vocab = 256;
    Index d_model = 64;
    Index d_ff = 256;
    Index n_layers = 4;
    QuantScope quant_scope = QuantScope::ffn_only;
    uint64_t seed = 1;

    void validate() const;
};

// Inference-time form of the shift/scale aux: the delta*W term is folded
// into a bias correction so no full-precision weight is needed.
struct FoldedProjAux {
    Tensor delta;
    Tensor s;
    Tensor extra_bias;  // delta * W, precomputed
};

// Hooks let callers substitute weights (quantized, overridden, frozen)
// without touching the forward-pass structure.
struct ForwardHooks {
    // Var for a parameter; default uses a leaf on grad tapes, constant otherwise.
    std::function<Var(Tape&, const std::string&, Param&)> weight;
    // Applied to quant-scope weight matrices only. For projections with
    // shift/scale aux this receives W*s, per the quantized affine transform.
    std::function<Var(Tape&, const std::string&, Var)> quant;
    // Live shift/scale (delta, s) per FFN projection weight name.
    std::function<std::optional<std::pair<Var, Var>>(Tape&, const std::string&)> ffn_aux;
    // Folded shift/scale for evaluation from stored codes.
    std::function<std::optional<FoldedProjAux>(const std::string&)> ffn_fold;
};

// Embedding -> n_layers x [single-head causal attention + gated FFN] -> head.
// Pre-norm RMSNorm, sinusoidal positions, zero-initialized output head.
class ToyModel {
  public:
    explicit ToyModel(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    std::map<std::string, Param>& params() { return params_; }
    const std::map<std::string, Param>& params() const { return params_; }
    Param& param(const std::string& name);
    const Param& param(const std::string& name) const;

    bool is_quant_target(const std::string& name) const;
    std::vector<std::string> quant_target_names() const;
    // Names of the FFN projection matrices of one layer.
    static std::vector<std::string> ffn_proj_names(int layer);

    // Documented parameter-count formula; asserted in tests.
    Index param_count() const;

    // Logits [batch*seq, vocab].
    Var forward(Tape& tape, const std::vector<int>& tokens, Index batch, Index seq,
                const ForwardHooks& hooks = {}) const;

    // One block's output from an explicit input [batch, seq, d_model].
    Var layer_forward(Tape& tape, int layer, Var x, Index batch, Index seq,
                      const ForwardHooks& hooks = {}) const;
    // Convenience override form: per-parameter replacement tensors.
    Tensor layer_forward_override(int layer, const Tensor& x_l,
                                  const std::map<std::string, Tensor>& weight_override) const;

    // Embedding plus positional encoding, the input to layer 0.
    Var embed_stage(Tape& tape, const std::vector<int>& tokens, Index batch, Index seq) const;

    // Per-layer inputs X_l on calibration batches, recorded with the float
    // weights in inference mode; result[layer][batch] has shape [B, T, d].
    std::vector<std::vector<Tensor>> capture_activations(const std::vector<Batch>& batches) const;

    void zero_grads();

  private:
    Var block(Tape& tape, int layer, Var h, Index batch, Index seq,
              const ForwardHooks& hooks) const;

    ModelConfig cfg_;
    std::map<std::string, Param> params_;
};

// Learnable auxiliary parameters for the OmniQuant-style path: clipping
// scales per quantized matrix, shift/scale per FFN projection.
struct OmniParamAux {
    Param gamma;  // [channels]
    Param beta;   // [channels]
};
struct OmniProjAux {
    Param delta;  // [d_in]
    Param s;      // [d_in], > 0
};
struct OmniAux {
    // Keyed by weight parameter name.
    std::map<std::string, OmniParamAux> clips;
    std::map<std::string, OmniProjAux> proj;

    static OmniAux init_for(const ToyModel& model);
    void reset_layer(const ToyModel& model, int layer);
};

Tensor sinusoidal_positions(Index seq, Index d_model);

}  // namespace matquant
