#include "matquant/model.hpp"

#include <cmath>

#include "matquant/quant.hpp"

namespace matquant {

void ModelConfig::validate() const {
    if (vocab <= 0 || d_model <= 0 || d_ff <= 0 || n_layers <= 0)
        throw ContractError("model extents must be positive");
    if (d_ff < d_model) throw ContractError("d_ff must be >= d_model");
}

namespace {

std::string layer_prefix(int l) { return "layers." + std::to_string(l) + "."; }

Var default_weight(Tape& tape, Param& p) {
    return tape.grad_enabled() ? tape.leaf(p) : tape.constant(p.value);
}

}  // namespace

ToyModel::ToyModel(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const Index d = cfg_.d_model;
    const Index f = cfg_.d_ff;

    auto add = [&](const std::string& name, Tensor t) { params_.emplace(name, Param(std::move(t))); };

    add("embed", Tensor::randn({cfg_.vocab, d}, rng, 0.02));
    const Real attn_std = 1.0 / std::sqrt(static_cast<Real>(d));
    const Real down_std = 1.0 / std::sqrt(static_cast<Real>(f));
    for (int l = 0; l < cfg_.n_layers; ++l) {
        std::string p = layer_prefix(l);
        add(p + "attn_norm", Tensor::full({d}, 1.0));
        add(p + "wq", Tensor::randn({d, d}, rng, attn_std));
        add(p + "wk", Tensor::randn({d, d}, rng, attn_std));
        add(p + "wv", Tensor::randn({d, d}, rng, attn_std));
        add(p + "wo", Tensor::randn({d, d}, rng, attn_std));
        add(p + "ffn_norm", Tensor::full({d}, 1.0));
        add(p + "w_gate", Tensor::randn({d, f}, rng, attn_std));
        add(p + "b_gate", Tensor::zeros({f}));
        add(p + "w_up", Tensor::randn({d, f}, rng, attn_std));
        add(p + "b_up", Tensor::zeros({f}));
        add(p + "w_down", Tensor::randn({f, d}, rng, down_std));
        add(p + "b_down", Tensor::zeros({d}));
    }
    add("out_norm", Tensor::full({d}, 1.0));
    // Zero head: the initial model predicts the uniform distribution.
    add("head", Tensor::zeros({d, cfg_.vocab}));
}

Param& ToyModel::param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("no such parameter: " + name);
    return it->second;
}

const Param& ToyModel::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("no such parameter: " + name);
    return it->second;
}

bool ToyModel::is_quant_target(const std::string& name) const {
    auto ends_with = [&](const char* suffix) {
        std::string_view sv(name);
        std::string_view sf(suffix);
        return sv.size() > sf.size() && sv.substr(sv.size() - sf.size()) == sf;
    };
    if (name.rfind("layers.", 0) != 0) return false;
    if (ends_with("w_gate") || ends_with("w_up") || ends_with("w_down")) return true;
    if (cfg_.quant_scope == QuantScope::ffn_and_attention)
        return ends_with("wq") || ends_with("wk") || ends_with("wv") || ends_with("wo");
    return false;
}

std::vector<std::string> ToyModel::quant_target_names() const {
    std::vector<std::string> out;
    for (const auto& [name, p] : params_)
        if (is_quant_target(name)) out.push_back(name);
    return out;
}

std::vector<std::string> ToyModel::ffn_proj_names(int layer) {
    std::string p = layer_prefix(layer);
    return {p + "w_gate", p + "w_up", p + "w_down"};
}

Index ToyModel::param_count() const {
    const Index d = cfg_.d_model, f = cfg_.d_ff, v = cfg_.vocab, L = cfg_.n_layers;
    // embed + L * (2 norms + 4 attn mats + gate/up/down mats + 3 biases)
    // + final norm + head
    return v * d + L * (2 * d + 4 * d * d + 2 * (d * f + f) + (f * d + d)) + d + d * v;
}

Tensor sinusoidal_positions(Index seq, Index d_model) {
    Tensor pos({seq, d_model});
    auto m = pos.mat2d();
    for (Index t = 0; t < seq; ++t) {
        for (Index i = 0; i < d_model; i += 2) {
            Real freq = std::pow(10000.0, -static_cast<Real>(i) / static_cast<Real>(d_model));
            m(t, i) = std::sin(static_cast<Real>(t) * freq);
            if (i + 1 < d_model) m(t, i + 1) = std::cos(static_cast<Real>(t) * freq);
        }
    }
    return pos;
}

Var ToyModel::embed_stage(Tape& tape, const std::vector<int>& tokens, Index batch,
                          Index seq) const {
    if (static_cast<Index>(tokens.size()) != batch * seq)
        throw DimensionError("token count does not match batch*seq");
    for (int t : tokens)
        if (t < 0 || t >= cfg_.vocab) throw ContractError("token id out of vocab range");
    Param& embed = const_cast<Param&>(param("embed"));
    Var table = default_weight(tape, embed);
    Var x = gather_rows(table, tokens);
    Tensor pos = sinusoidal_positions(seq, cfg_.d_model);
    Tensor tiled({batch * seq, cfg_.d_model});
    for (Index b = 0; b < batch; ++b)
        tiled.array().segment(b * seq * cfg_.d_model, seq * cfg_.d_model) = pos.array();
    return add(x, tape.constant(std::move(tiled)));
}

namespace {

Var hook_weight(Tape& tape, const ForwardHooks& hooks, const std::string& name, Param& p) {
    if (hooks.weight) return hooks.weight(tape, name, p);
    return default_weight(tape, p);
}

}  // namespace

Var ToyModel::block(Tape& tape, int layer, Var h, Index batch, Index seq,
                    const ForwardHooks& hooks) const {
    const std::string pre = layer_prefix(layer);
    auto self = const_cast<ToyModel*>(this);
    auto w = [&](const std::string& suffix) -> Var {
        std::string name = pre + suffix;
        Var v = hook_weight(tape, hooks, name, self->param(name));
        if (hooks.quant && is_quant_target(name)) v = hooks.quant(tape, name, v);
        return v;
    };

    // Attention sublayer.
    Var a_in = rmsnorm(h, hook_weight(tape, hooks, pre + "attn_norm", self->param(pre + "attn_norm")));
    Var q = matmul(a_in, w("wq"));
    Var k = matmul(a_in, w("wk"));
    Var v = matmul(a_in, w("wv"));
    const Real inv_sqrt_d = 1.0 / std::sqrt(static_cast<Real>(cfg_.d_model));
    std::vector<Var> heads;
    heads.reserve(static_cast<size_t>(batch));
    for (Index b = 0; b < batch; ++b) {
        Var qb = rows(q, b * seq, seq);
        Var kb = rows(k, b * seq, seq);
        Var vb = rows(v, b * seq, seq);
        Var scores = scale(matmul(qb, transpose(kb)), inv_sqrt_d);
        heads.push_back(matmul(causal_softmax(scores), vb));
    }
    Var attn = matmul(concat_rows(heads), w("wo"));
    h = add(h, attn);

    // Gated FFN sublayer.
    Var f_in = rmsnorm(h, hook_weight(tape, hooks, pre + "ffn_norm", self->param(pre + "ffn_norm")));
    auto proj = [&](const std::string& wname, const std::string& bname, Var x) -> Var {
        std::string full_w = pre + wname;
        Var wv = hook_weight(tape, hooks, full_w, self->param(full_w));
        Var bv = hook_weight(tape, hooks, pre + bname, self->param(pre + bname));
        std::function<Var(Var)> qfn = [&](Var u) {
            return (hooks.quant && is_quant_target(full_w)) ? hooks.quant(tape, full_w, u) : u;
        };
        if (hooks.ffn_aux) {
            if (auto aux = hooks.ffn_aux(tape, full_w))
                return apply_affine_aux(x, wv, bv, aux->first, aux->second, qfn);
        }
        if (hooks.ffn_fold) {
            if (auto fold = hooks.ffn_fold(full_w)) {
                Tensor neg_delta(fold->delta.shape(), -fold->delta.array());
                Var xs = div_rowvec(add_rowvec(x, tape.constant(std::move(neg_delta))),
                                    tape.constant(fold->s));
                Var y = add_rowvec(matmul(xs, qfn(wv)), bv);
                return add_rowvec(y, tape.constant(fold->extra_bias));
            }
        }
        return add_rowvec(matmul(x, qfn(wv)), bv);
    };
    Var gate = proj("w_gate", "b_gate", f_in);
    Var up = proj("w_up", "b_up", f_in);
    Var act = mul(silu(gate), up);
    Var down = proj("w_down", "b_down", act);
    return add(h, down);
}

Var ToyModel::forward(Tape& tape, const std::vector<int>& tokens, Index batch, Index seq,
                      const ForwardHooks& hooks) const {
    Var h = embed_stage(tape, tokens, batch, seq);
    for (int l = 0; l < cfg_.n_layers; ++l) h = block(tape, l, h, batch, seq, hooks);
    auto self = const_cast<ToyModel*>(this);
    Var out = rmsnorm(h, hook_weight(tape, hooks, "out_norm", self->param("out_norm")));
    return matmul(out, hook_weight(tape, hooks, "head", self->param("head")));
}

Var ToyModel::layer_forward(Tape& tape, int layer, Var x, Index batch, Index seq,
                            const ForwardHooks& hooks) const {
    if (layer < 0 || layer >= cfg_.n_layers) throw ContractError("layer index out of range");
    const Tensor& xv = x.value();
    if (xv.numel() != batch * seq * cfg_.d_model)
        throw DimensionError("layer input does not match [batch, seq, d_model]");
    Var flat = reshape(x, {batch * seq, cfg_.d_model});
    return block(tape, layer, flat, batch, seq, hooks);
}

Tensor ToyModel::layer_forward_override(int layer, const Tensor& x_l,
                                        const std::map<std::string, Tensor>& weight_override) const {
    Tape tape(false);
    ForwardHooks hooks;
    hooks.weight = [&](Tape& t, const std::string& name, Param& p) -> Var {
        auto it = weight_override.find(name);
        Tensor v = it != weight_override.end() ? it->second : p.value;
        if (!v.same_shape(p.value)) throw DimensionError("weight override shape mismatch: " + name);
        return t.constant(std::move(v));
    };
    Index batch = x_l.rank() == 3 ? x_l.dim(0) : 1;
    Index seq = x_l.rank() == 3 ? x_l.dim(1) : x_l.dim(0);
    Var x = tape.constant(x_l);
    return layer_forward(tape, layer, x, batch, seq, hooks).value();
}

std::vector<std::vector<Tensor>> ToyModel::capture_activations(
    const std::vector<Batch>& batches) const {
    std::vector<std::vector<Tensor>> acts(static_cast<size_t>(cfg_.n_layers));
    for (const Batch& b : batches) {
        Tape tape(false);
        Var h = embed_stage(tape, b.inputs, b.batch, b.seq);
        for (int l = 0; l < cfg_.n_layers; ++l) {
            Tensor x({b.batch, b.seq, cfg_.d_model}, h.value().array());
            acts[static_cast<size_t>(l)].push_back(std::move(x));
            h = block(tape, l, h, b.batch, b.seq, {});
        }
    }
    return acts;
}

void ToyModel::zero_grads() {
    for (auto& [name, p] : params_) p.zero_grad();
}

OmniAux OmniAux::init_for(const ToyModel& model) {
    OmniAux aux;
    for (const std::string& name : model.quant_target_names()) {
        const Tensor& w = model.param(name).value;
        Index nch = channel_count(w.shape(), 1);
        aux.clips.emplace(name, OmniParamAux{Param(Tensor::full({nch}, 1.0)),
                                             Param(Tensor::full({nch}, 1.0))});
    }
    for (int l = 0; l < model.config().n_layers; ++l) {
        for (const std::string& name : ToyModel::ffn_proj_names(l)) {
            Index d_in = model.param(name).value.dim(0);
            aux.proj.emplace(name, OmniProjAux{Param(Tensor::zeros({d_in})),
                                               Param(Tensor::full({d_in}, 1.0))});
        }
    }
    return aux;
}

void OmniAux::reset_layer(const ToyModel& model, int layer) {
    std::string pre = layer_prefix(layer);
    for (auto& [name, clip] : clips) {
        if (name.rfind(pre, 0) != 0) continue;
        clip.gamma.value.array().setConstant(1.0);
        clip.beta.value.array().setConstant(1.0);
    }
    for (auto& [name, pa] : proj) {
        if (name.rfind(pre, 0) != 0) continue;
        pa.delta.value.array().setZero();
        pa.s.value.array().setConstant(1.0);
    }
    (void)model;
}

}  // namespace matquant
