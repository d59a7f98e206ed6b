#include "matquant/objectives.hpp"

#include <algorithm>
#include <set>

namespace matquant {

void MatQuantConfig::validate() const {
    if (c < kMinBits || c > kMaxBits) throw ContractError("base bit-width must be in [2, 8]");
    std::set<int> rs(precisions.begin(), precisions.end());
    for (int r : precisions)
        if (r < 1 || r > c) throw ContractError("every precision must satisfy 1 <= r <= c");
    std::set<int> allowed = rs;
    for (const DistillEdge& e : codistill) {
        if (e.teacher_bits <= e.student_bits)
            throw ContractError("distill edge needs teacher_bits > student_bits");
        if (e.teacher_bits > c || e.student_bits < 1)
            throw ContractError("distill edge bits out of range");
        allowed.insert(e.student_bits);
    }
    for (const auto& [r, l] : lambdas) {
        if (l < 0.0) throw ContractError("loss weights must be non-negative");
        if (!allowed.count(r)) throw ContractError("lambda key " + std::to_string(r) +
                                                   " is not a precision or distill target");
    }
    bool any = !codistill.empty();
    for (int r : precisions)
        if (lambda_for(r) > 0.0) any = true;
    if (!any) throw ContractError("need at least one positive lambda or one distill edge");
}

double MatQuantConfig::lambda_for(int r) const {
    auto it = lambdas.find(r);
    if (it != lambdas.end()) return it->second;
    // Default re-weighting for the canonical {8, 4, 2} recipe, 1.0 otherwise.
    std::set<int> rs(precisions.begin(), precisions.end());
    if (rs == std::set<int>{8, 4, 2}) return r == 2 ? 1.0 : 0.1;
    return 1.0;
}

MatQuantConfig MatQuantConfig::from_string(const std::string& grammar) {
    std::string s = grammar;
    // Normalize the UTF-8 arrow to "->" and strip brackets/spaces.
    const std::string arrow = "\xe2\x86\x92";
    for (size_t pos; (pos = s.find(arrow)) != std::string::npos;) s.replace(pos, arrow.size(), "->");
    std::erase_if(s, [](char ch) { return ch == '[' || ch == ']' || ch == ' '; });

    MatQuantConfig cfg;
    cfg.precisions.clear();
    size_t start = 0;
    auto parse_int = [](const std::string& tok) {
        try {
            size_t used = 0;
            int v = std::stoi(tok, &used);
            if (used != tok.size()) throw std::invalid_argument(tok);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("bad number in config string: '" + tok + "'");
        }
    };
    while (start <= s.size()) {
        size_t comma = s.find(',', start);
        std::string tok = s.substr(start, comma == std::string::npos ? comma : comma - start);
        if (tok.empty()) throw ConfigError("empty token in config string");
        size_t ar = tok.find("->");
        if (ar == std::string::npos) {
            cfg.precisions.push_back(parse_int(tok));
        } else {
            int teacher = parse_int(tok.substr(0, ar));
            std::string students = tok.substr(ar + 2);
            size_t p = 0;
            while (p <= students.size()) {
                size_t semi = students.find(';', p);
                std::string st = students.substr(p, semi == std::string::npos ? semi : semi - p);
                if (st.empty()) throw ConfigError("empty student in distill edge");
                cfg.codistill.push_back(DistillEdge{teacher, parse_int(st)});
                if (semi == std::string::npos) break;
                p = semi + 1;
            }
        }
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    if (!cfg.precisions.empty())
        cfg.c = *std::max_element(cfg.precisions.begin(), cfg.precisions.end());
    cfg.validate();
    return cfg;
}

std::string MatQuantConfig::to_string() const {
    std::string s = "[";
    bool first = true;
    for (int r : precisions) {
        if (!first) s += ",";
        s += std::to_string(r);
        first = false;
    }
    for (const DistillEdge& e : codistill) {
        if (!first) s += ",";
        s += std::to_string(e.teacher_bits) + "->" + std::to_string(e.student_bits);
        first = false;
    }
    return s + "]";
}

// ---- QAT-style losses ----

namespace {

// Shared per-step quantization state across the per-precision forwards.
struct QatStep {
    std::map<std::string, Var> leaves;
    std::map<std::string, std::shared_ptr<SharedQuant>> shared;

    Var leaf_for(Tape& tape, const std::string& name, Param& p) {
        auto it = leaves.find(name);
        if (it != leaves.end()) return it->second;
        Var v = tape.grad_enabled() ? tape.leaf(p) : tape.constant(p.value);
        leaves.emplace(name, v);
        return v;
    }
};

ForwardHooks qat_hooks(QatStep& step, int c, int r, SliceMode mode) {
    ForwardHooks hooks;
    hooks.weight = [&step](Tape& t, const std::string& name, Param& p) {
        return step.leaf_for(t, name, p);
    };
    hooks.quant = [&step, c, r, mode](Tape&, const std::string& name, Var w) {
        auto it = step.shared.find(name);
        if (it == step.shared.end())
            it = step.shared.emplace(name, make_shared_quant(w.value(), c, 1)).first;
        return ste_slice_shared(w, it->second, r, mode);
    };
    return hooks;
}

}  // namespace

Var qat_loss(Tape& tape, ToyModel& model, const Batch& batch, int c) {
    QatStep step;
    Var logits = model.forward(tape, batch.inputs, batch.batch, batch.seq,
                               qat_hooks(step, c, c, SliceMode::plain));
    return softmax_xent(logits, batch.targets);
}

Var codistill_term(Tape& tape, const Tensor& teacher_logits, Var student_logits,
                   const std::vector<int>& targets, DistillCombine combine) {
    Tensor soft = softmax_value(teacher_logits);
    Var distill = xent_soft(student_logits, soft);
    if (combine == DistillCombine::standalone) return distill;
    Var gt = softmax_xent(student_logits, targets);
    return scale(add(distill, gt), 0.5);
}

Var matquant_qat_loss(Tape& tape, ToyModel& model, const Batch& batch,
                      const MatQuantConfig& cfg) {
    cfg.validate();
    if (cfg.base != BaseAlgo::qat) throw ContractError("matquant_qat_loss requires base=qat");

    QatStep step;
    std::map<int, Var> logits_at;
    auto forward_at = [&](int r) -> Var {
        auto it = logits_at.find(r);
        if (it != logits_at.end()) return it->second;
        Var l = model.forward(tape, batch.inputs, batch.batch, batch.seq,
                              qat_hooks(step, cfg.c, r, cfg.slice_mode));
        logits_at.emplace(r, l);
        return l;
    };

    std::optional<Var> total;
    auto accumulate = [&](Var term, double weight) {
        if (weight == 0.0) return;
        Var scaled = scale(term, weight);
        total = total ? add(*total, scaled) : scaled;
    };

    for (int r : cfg.precisions)
        accumulate(softmax_xent(forward_at(r), batch.targets), cfg.lambda_for(r));
    for (const DistillEdge& e : cfg.codistill) {
        Tensor teacher = forward_at(e.teacher_bits).value();
        Var student = forward_at(e.student_bits);
        accumulate(codistill_term(tape, teacher, student, batch.targets, e.combine), e.lambda);
    }
    if (!total) throw ContractError("matquant loss has no active terms");
    return *total;
}

Var single_precision_loss(Tape& tape, ToyModel& model, const Batch& batch, int r, int c) {
    MatQuantConfig cfg;
    cfg.c = c;
    cfg.precisions = {r};
    cfg.lambdas = {{r, 1.0}};
    return matquant_qat_loss(tape, model, batch, cfg);
}

// ---- block-reconstruction losses ----

Var layer_recon_loss(Tape& tape, const ToyModel& model, int layer, const Tensor& x_l,
                     const Tensor& y_ref, const ForwardHooks& hooks) {
    Index batch = x_l.rank() == 3 ? x_l.dim(0) : 1;
    Index seq = x_l.rank() == 3 ? x_l.dim(1) : x_l.dim(0);
    Var x = tape.constant(x_l);
    Var out = model.layer_forward(tape, layer, x, batch, seq, hooks);
    Var ref = tape.constant(Tensor({batch * seq, model.config().d_model}, y_ref.array()));
    return mean(square(sub(out, ref)));
}

namespace {

// Per-step omni quantizer state: alpha/z built once per weight, codes shared
// across the per-precision slices.
struct OmniStep {
    struct Entry {
        OmniScales scales;
        std::shared_ptr<OmniShared> shared;
    };
    std::map<std::string, Entry> entries;
    std::map<std::string, Var> aux_leaves;

    Var aux_leaf(Tape& tape, const std::string& key, Param& p) {
        auto it = aux_leaves.find(key);
        if (it != aux_leaves.end()) return it->second;
        Var v = tape.grad_enabled() ? tape.leaf(p) : tape.constant(p.value);
        aux_leaves.emplace(key, v);
        return v;
    }
};

ForwardHooks omni_hooks(OmniStep& step, const ToyModel& model, OmniAux& aux, int c, int r,
                        SliceMode mode) {
    ForwardHooks hooks;
    // Weights are frozen: always constants.
    hooks.weight = [](Tape& t, const std::string&, Param& p) { return t.constant(p.value); };
    hooks.quant = [&step, &aux, c, r, mode](Tape& t, const std::string& name, Var w) {
        auto it = step.entries.find(name);
        if (it == step.entries.end()) {
            auto clip = aux.clips.find(name);
            if (clip == aux.clips.end()) throw ContractError("no clip aux for " + name);
            Var gamma = step.aux_leaf(t, name + ".gamma", clip->second.gamma);
            Var beta = step.aux_leaf(t, name + ".beta", clip->second.beta);
            OmniScales sc = omni_alpha_z(t, gamma, beta, w.value(), c, 1);
            auto sh = make_omni_shared(w.value(), sc.alpha.value(), sc.z.value(), c, 1);
            it = step.entries.emplace(name, OmniStep::Entry{sc, sh}).first;
        }
        return ste_affine_slice(w, it->second.scales.alpha, it->second.scales.z, it->second.shared,
                                r, mode);
    };
    hooks.ffn_aux = [&step, &aux](Tape& t, const std::string& name)
        -> std::optional<std::pair<Var, Var>> {
        auto it = aux.proj.find(name);
        if (it == aux.proj.end()) return std::nullopt;
        Var delta = step.aux_leaf(t, name + ".delta", it->second.delta);
        Var s = step.aux_leaf(t, name + ".s", it->second.s);
        return std::make_pair(delta, s);
    };
    (void)model;
    return hooks;
}

}  // namespace

Var matquant_recon_loss(Tape& tape, const ToyModel& model, int layer, const Tensor& x_l,
                        const Tensor& y_ref, OmniAux& aux, const MatQuantConfig& cfg) {
    cfg.validate();
    if (cfg.base != BaseAlgo::block_recon)
        throw ContractError("matquant_recon_loss requires base=block_recon");

    OmniStep step;
    std::map<int, Var> out_at;
    Index batch = x_l.rank() == 3 ? x_l.dim(0) : 1;
    Index seq = x_l.rank() == 3 ? x_l.dim(1) : x_l.dim(0);
    auto forward_at = [&](int r) -> Var {
        auto it = out_at.find(r);
        if (it != out_at.end()) return it->second;
        // The per-step state is shared, so each precision re-slices the same
        // alpha/z/codes rather than re-quantizing.
        Var x = tape.constant(x_l);
        Var out = model.layer_forward(tape, layer, x, batch, seq,
                                      omni_hooks(step, model, aux, cfg.c, r, cfg.slice_mode));
        out_at.emplace(r, out);
        return out;
    };

    Var ref = tape.constant(Tensor({batch * seq, model.config().d_model}, y_ref.array()));
    std::optional<Var> total;
    auto accumulate = [&](Var term, double weight) {
        if (weight == 0.0) return;
        Var scaled = scale(term, weight);
        total = total ? add(*total, scaled) : scaled;
    };

    for (int r : cfg.precisions) accumulate(mean(square(sub(forward_at(r), ref))), cfg.lambda_for(r));
    for (const DistillEdge& e : cfg.codistill) {
        Tensor teacher = forward_at(e.teacher_bits).value();
        Var student = forward_at(e.student_bits);
        Var distill = mean(square(sub(student, tape.constant(teacher))));
        if (e.combine == DistillCombine::with_ground_truth)
            distill = scale(add(distill, mean(square(sub(student, ref)))), 0.5);
        accumulate(distill, e.lambda);
    }
    if (!total) throw ContractError("matquant loss has no active terms");
    return *total;
}

Var block_recon_loss(Tape& tape, const ToyModel& model, int layer, const Tensor& x_l,
                     const Tensor& y_ref, OmniAux& aux, int c) {
    MatQuantConfig cfg;
    cfg.base = BaseAlgo::block_recon;
    cfg.c = c;
    cfg.precisions = {c};
    cfg.lambdas = {{c, 1.0}};
    return matquant_recon_loss(tape, model, layer, x_l, y_ref, aux, cfg);
}

// ---- materialization ----

std::map<std::string, QuantizedTensor> materialize_qat(const ToyModel& model, int c) {
    std::map<std::string, QuantizedTensor> out;
    for (const std::string& name : model.quant_target_names())
        out.emplace(name, minmax_quantize(model.param(name).value, c, 1));
    return out;
}

OmniMaterialized materialize_omniquant(const ToyModel& model, const OmniAux& aux, int c) {
    OmniMaterialized m;
    for (const std::string& name : model.quant_target_names()) {
        const Tensor& w = model.param(name).value;
        Tensor ws = w;
        auto proj = aux.proj.find(name);
        if (proj != aux.proj.end()) {
            const Tensor& s = proj->second.s.value;
            ws.mat().array().colwise() *= s.array();
            // Fold delta*W (full precision) into the bias path.
            const Tensor& delta = proj->second.delta.value;
            Tensor db({w.dim(1)});
            db.array() = (w.mat2d().transpose() * delta.array().matrix()).array();
            m.folds.emplace(name, FoldedProjAux{delta, s, std::move(db)});
        }
        auto clip = aux.clips.find(name);
        if (clip == aux.clips.end()) throw ContractError("no clip aux for " + name);
        m.qweights.emplace(
            name, omni_quantize(ws, c, clip->second.gamma.value, clip->second.beta.value, 1));
    }
    return m;
}

}  // namespace matquant
