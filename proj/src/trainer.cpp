#include "matquant/trainer.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

namespace matquant {

void TrainConfig::validate() const {
    if (steps < 0) throw ContractError("steps must be non-negative");
    if (lr <= 0.0) throw ContractError("learning rate must be positive");
    if (batch_size <= 0 || seq_len <= 0) throw ContractError("batch/seq must be positive");
    if (optimizer.name != "adam" && optimizer.name != "sgd")
        throw ConfigError("unknown optimizer: " + optimizer.name);
}

double TrainConfig::lr_at(int step) const {
    if (lr_schedule == LrSchedule::constant) return lr;
    int warm = warmup_steps > 0 ? warmup_steps : std::max(1, steps / 20);
    if (step < warm) return lr * static_cast<double>(step + 1) / static_cast<double>(warm);
    double t = static_cast<double>(step - warm) / static_cast<double>(std::max(1, steps - warm));
    return 0.5 * lr * (1.0 + std::cos(M_PI * t));
}

Optimizer::Optimizer(OptimizerCfg cfg, std::vector<std::pair<std::string, Param*>> params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
    for (auto& [name, p] : params_)
        moments_.emplace(name, std::make_pair(Tensor::zeros(p->value.shape()),
                                              Tensor::zeros(p->value.shape())));
}

void Optimizer::zero_grads() {
    for (auto& [name, p] : params_) p->zero_grad();
}

void Optimizer::step(double lr, double clip_norm) {
    if (clip_norm > 0.0) {
        double sq = 0.0;
        for (auto& [name, p] : params_) sq += p->grad.array().square().sum();
        double norm = std::sqrt(sq);
        if (norm > clip_norm) {
            double s = clip_norm / norm;
            for (auto& [name, p] : params_) p->grad.array() *= s;
        }
    }
    ++t_;
    if (cfg_.name == "sgd") {
        for (auto& [name, p] : params_) p->value.array() -= lr * p->grad.array();
        return;
    }
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (auto& [name, p] : params_) {
        auto& [m, v] = moments_.at(name);
        m.array() = b1 * m.array() + (1.0 - b1) * p->grad.array();
        v.array() = b2 * v.array() + (1.0 - b2) * p->grad.array().square();
        p->value.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
    }
}

// ---- evaluation ----

namespace {

double eval_ce_hooks(const ToyModel& model, const std::vector<Batch>& batches,
                     const ForwardHooks& hooks) {
    if (batches.empty()) throw ContractError("no eval batches");
    double total = 0.0;
    int64_t positions = 0;
    for (const Batch& b : batches) {
        Tape tape(false);
        Var logits = model.forward(tape, b.inputs, b.batch, b.seq, hooks);
        Var ce = softmax_xent(logits, b.targets);
        total += ce.value()[0] * static_cast<double>(b.batch * b.seq);
        positions += b.batch * b.seq;
    }
    return total / static_cast<double>(positions);
}

}  // namespace

double eval_ce_float(const ToyModel& model, const std::vector<Batch>& batches) {
    return eval_ce_hooks(model, batches, {});
}

double eval_ce_sliced(const ToyModel& model, const std::vector<Batch>& batches, int c, int r,
                      SliceMode mode) {
    if (c == 0) return eval_ce_float(model, batches);
    auto qweights = materialize_qat(model, c);
    std::map<std::string, int> bits;
    for (const auto& [name, q] : qweights) bits.emplace(name, r);
    return eval_ce_quantized(model, qweights, {}, bits, mode, batches);
}

double eval_ce_quantized(const ToyModel& skeleton,
                         const std::map<std::string, QuantizedTensor>& qweights,
                         const std::map<std::string, FoldedProjAux>& folds,
                         const std::map<std::string, int>& bits_per_name, SliceMode mode,
                         const std::vector<Batch>& batches) {
    // Slice + dequantize each stored weight once, then run fixed forwards.
    std::map<std::string, Tensor> deq;
    for (const auto& [name, q] : qweights) {
        auto it = bits_per_name.find(name);
        int r = it != bits_per_name.end() ? it->second : q.params.c;
        QuantizedTensor sliced = q.slice_state.active()
                                     ? q
                                     : (mode == SliceMode::extra
                                            ? slice_extra(q, SliceSpec{q.params.c, r, mode})
                                            : slice(q, SliceSpec{q.params.c, r, mode}));
        deq.emplace(name, dequantize(sliced));
    }
    ForwardHooks hooks;
    hooks.weight = [&](Tape& t, const std::string& name, Param& p) -> Var {
        auto it = deq.find(name);
        return t.constant(it != deq.end() ? it->second : p.value);
    };
    if (!folds.empty()) {
        hooks.ffn_fold = [&](const std::string& name) -> std::optional<FoldedProjAux> {
            auto it = folds.find(name);
            if (it == folds.end()) return std::nullopt;
            return it->second;
        };
    }
    return eval_ce_hooks(skeleton, batches, hooks);
}

// ---- training loops ----

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::vector<std::pair<std::string, Param*>> all_params(ToyModel& model) {
    std::vector<std::pair<std::string, Param*>> out;
    for (auto& [name, p] : model.params()) out.emplace_back(name, &p);
    return out;
}

// Shared skeleton for the two end-to-end loops. `make_loss` builds the step
// loss; `evals` fills the per-precision entries of a record.
template <typename LossFn, typename EvalFn>
std::vector<RunRecord> run_training(ToyModel& model, const Corpus& corpus, const TrainConfig& cfg,
                                    LossFn make_loss, EvalFn evals) {
    cfg.validate();
    Rng rng(cfg.seed);
    Optimizer opt(cfg.optimizer, all_params(model));
    std::vector<Batch> evalset = eval_batches(corpus, cfg.batch_size, cfg.seq_len,
                                              cfg.eval_batches);
    std::vector<RunRecord> records;
    auto t0 = Clock::now();

    double initial_loss = 0.0;
    int bad_evals = 0;
    auto record_at = [&](int step, double train_loss) {
        RunRecord rec;
        rec.step = step;
        rec.train_loss = train_loss;
        evals(rec, evalset);
        rec.wall_ms = ms_since(t0);
        records.push_back(std::move(rec));
    };

    for (int step = 0; step < cfg.steps; ++step) {
        Batch batch = sample_batch(corpus, cfg.batch_size, cfg.seq_len, rng);
        double loss_value = 0.0;
        try {
            Tape tape;
            Var loss = make_loss(tape, batch);
            loss_value = loss.value()[0];
            opt.zero_grads();
            tape.backward(loss);
        } catch (const NumericError& e) {
            throw DivergenceError(std::string("training diverged (non-finite): ") + e.what());
        }
        if (step == 0) {
            initial_loss = loss_value;
            record_at(0, loss_value);
        }
        opt.step(cfg.lr_at(step), cfg.clip_norm);

        bool at_eval = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps;
        if (at_eval) {
            if (!std::isfinite(loss_value) || loss_value > 10.0 * std::max(initial_loss, 1e-12))
                ++bad_evals;
            else
                bad_evals = 0;
            if (bad_evals >= 3)
                throw DivergenceError("training diverged: loss exceeded 10x initial for 3 evals");
            record_at(step + 1, loss_value);
        }
    }
    return records;
}

}  // namespace

std::vector<RunRecord> pretrain_float(ToyModel& model, const Corpus& corpus,
                                      const TrainConfig& cfg) {
    return run_training(
        model, corpus, cfg,
        [&](Tape& tape, const Batch& batch) {
            Var logits = model.forward(tape, batch.inputs, batch.batch, batch.seq, {});
            return softmax_xent(logits, batch.targets);
        },
        [&](RunRecord& rec, const std::vector<Batch>& evalset) {
            rec.eval_ce[0] = eval_ce_float(model, evalset);
        });
}

std::vector<RunRecord> train_matquant(ToyModel& model, const Corpus& corpus,
                                      const TrainConfig& cfg, const MatQuantConfig& mq) {
    mq.validate();
    if (mq.base != BaseAlgo::qat)
        throw ContractError("train_matquant drives the QAT base; use "
                            "train_omniquant_layerwise for block reconstruction");
    std::vector<int> eval_bits = mq.precisions;
    for (const DistillEdge& e : mq.codistill) eval_bits.push_back(e.student_bits);
    std::sort(eval_bits.begin(), eval_bits.end(), std::greater<>());
    eval_bits.erase(std::unique(eval_bits.begin(), eval_bits.end()), eval_bits.end());

    return run_training(
        model, corpus, cfg,
        [&](Tape& tape, const Batch& batch) { return matquant_qat_loss(tape, model, batch, mq); },
        [&](RunRecord& rec, const std::vector<Batch>& evalset) {
            for (int r : eval_bits)
                rec.eval_ce[r] = eval_ce_sliced(model, evalset, mq.c, r, mq.slice_mode);
        });
}

OmniTrainResult train_omniquant_layerwise(const ToyModel& model,
                                          const std::vector<std::vector<Tensor>>& activations,
                                          const TrainConfig& cfg, const MatQuantConfig& mq) {
    cfg.validate();
    mq.validate();
    if (mq.base != BaseAlgo::block_recon)
        throw ContractError("train_omniquant_layerwise requires base=block_recon");
    if (static_cast<Index>(activations.size()) != model.config().n_layers)
        throw ContractError("need activations for every layer");

    OmniTrainResult result;
    result.aux = OmniAux::init_for(model);

    for (int layer = 0; layer < model.config().n_layers; ++layer) {
        const auto& acts = activations[static_cast<size_t>(layer)];
        if (acts.empty()) throw ContractError("no calibration batches for layer");

        // Float reference outputs, fixed for the whole layer run.
        std::vector<Tensor> refs;
        refs.reserve(acts.size());
        for (const Tensor& x : acts) refs.push_back(model.layer_forward_override(layer, x, {}));

        std::vector<std::pair<std::string, Param*>> layer_params;
        std::string prefix = "layers." + std::to_string(layer) + ".";
        for (auto& [name, clip] : result.aux.clips) {
            if (name.rfind(prefix, 0) != 0) continue;
            layer_params.emplace_back(name + ".gamma", &clip.gamma);
            layer_params.emplace_back(name + ".beta", &clip.beta);
        }
        for (auto& [name, pa] : result.aux.proj) {
            if (name.rfind(prefix, 0) != 0) continue;
            layer_params.emplace_back(name + ".delta", &pa.delta);
            layer_params.emplace_back(name + ".s", &pa.s);
        }

        auto total_loss = [&]() {
            double sum = 0.0;
            for (size_t b = 0; b < acts.size(); ++b) {
                Tape tape(false);
                sum += matquant_recon_loss(tape, model, layer, acts[b], refs[b], result.aux, mq)
                           .value()[0];
            }
            return sum / static_cast<double>(acts.size());
        };

        OmniLayerReport report;
        report.layer = layer;
        report.init_loss = total_loss();

        Optimizer opt(cfg.optimizer, layer_params);
        bool diverged = false;
        for (int step = 0; step < cfg.steps && !diverged; ++step) {
            const size_t b = static_cast<size_t>(step) % acts.size();
            try {
                Tape tape;
                Var loss =
                    matquant_recon_loss(tape, model, layer, acts[b], refs[b], result.aux, mq);
                opt.zero_grads();
                tape.backward(loss);
                opt.step(cfg.lr_at(step), cfg.clip_norm);
                // s must stay positive; nudge back into range if a step
                // crossed zero.
                for (auto& [name, p] : layer_params)
                    if (name.size() > 2 && name.rfind(".s") == name.size() - 2)
                        p->value.array() = p->value.array().max(1e-4);
            } catch (const NumericError&) {
                diverged = true;
            }
        }

        report.final_loss = diverged ? report.init_loss : total_loss();
        if (diverged || !std::isfinite(report.final_loss) ||
            report.final_loss > report.init_loss) {
            result.aux.reset_layer(model, layer);
            report.final_loss = report.init_loss;
            report.kept_init = true;
        }
        result.layers.push_back(report);
    }
    return result;
}

std::string run_record_json(const RunRecord& rec) {
    std::ostringstream os;
    os.precision(17);
    os << "{\"step\":" << rec.step << ",\"train_loss\":" << rec.train_loss << ",\"eval_ce\":{";
    bool first = true;
    for (const auto& [r, ce] : rec.eval_ce) {
        if (!first) os << ",";
        os << "\"" << r << "\":" << ce;
        first = false;
    }
    os << "},\"wall_ms\":" << rec.wall_ms << "}";
    return os.str();
}

}  // namespace matquant
