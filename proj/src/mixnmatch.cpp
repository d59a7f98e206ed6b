#include "matquant/mixnmatch.hpp"

#include <algorithm>
#include <cmath>

#include "matquant/trainer.hpp"

namespace matquant {

Strategy strategy_from_string(const std::string& name) {
    if (name == "pyramid") return Strategy::pyramid;
    if (name == "reverse_pyramid") return Strategy::reverse_pyramid;
    if (name == "increasing") return Strategy::increasing;
    if (name == "decreasing") return Strategy::decreasing;
    throw ConfigError("unknown strategy: " + name);
}

std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::pyramid: return "pyramid";
        case Strategy::reverse_pyramid: return "reverse_pyramid";
        case Strategy::increasing: return "increasing";
        case Strategy::decreasing: return "decreasing";
    }
    throw ContractError("bad strategy value");
}

std::vector<Strategy> all_strategies() {
    return {Strategy::pyramid, Strategy::reverse_pyramid, Strategy::increasing,
            Strategy::decreasing};
}

namespace {

std::vector<Index> uniform_if_empty(const std::vector<Index>& layer_params, size_t n) {
    if (layer_params.empty()) return std::vector<Index>(n, 1);
    if (layer_params.size() != n) throw DimensionError("layer_params length mismatch");
    return layer_params;
}

}  // namespace

double effective_bits(const std::vector<int>& bits, const std::vector<Index>& layer_params) {
    auto weights = uniform_if_empty(layer_params, bits.size());
    double num = 0.0, den = 0.0;
    for (size_t l = 0; l < bits.size(); ++l) {
        num += static_cast<double>(bits[l]) * static_cast<double>(weights[l]);
        den += static_cast<double>(weights[l]);
    }
    return num / den;
}

double effective_bits_extra(const std::vector<int>& bits, const std::vector<double>& overflow,
                            const std::vector<Index>& layer_params) {
    if (overflow.size() != bits.size())
        throw DimensionError("one overflow fraction per layer required");
    auto weights = uniform_if_empty(layer_params, bits.size());
    double num = 0.0, den = 0.0;
    for (size_t l = 0; l < bits.size(); ++l) {
        if (overflow[l] < 0.0 || overflow[l] > 1.0)
            throw ContractError("overflow fraction outside [0, 1]");
        num += (static_cast<double>(bits[l]) + overflow[l]) * static_cast<double>(weights[l]);
        den += static_cast<double>(weights[l]);
    }
    return num / den;
}

namespace {

// Arrangement of (a twos, b fours, c8 eights) in the strategy's shape. The
// count triple fully determines effective bits, so all four strategies reach
// the same cost points with different layer placement.
std::vector<int> arrange(Strategy s, int a, int b, int c8) {
    std::vector<int> bits;
    auto emit = [&](int count, int value) { bits.insert(bits.end(), count, value); };
    switch (s) {
        case Strategy::increasing:
            emit(a, 2);
            emit(b, 4);
            emit(c8, 8);
            break;
        case Strategy::decreasing:
            emit(c8, 8);
            emit(b, 4);
            emit(a, 2);
            break;
        case Strategy::pyramid:
            emit((a + 1) / 2, 2);
            emit((b + 1) / 2, 4);
            emit(c8, 8);
            emit(b / 2, 4);
            emit(a / 2, 2);
            break;
        case Strategy::reverse_pyramid:
            emit((c8 + 1) / 2, 8);
            emit((b + 1) / 2, 4);
            emit(a, 2);
            emit(b / 2, 4);
            emit(c8 / 2, 8);
            break;
    }
    return bits;
}

double spread(const std::vector<int>& bits) {
    double m = 0.0;
    for (int b : bits) m += b;
    m /= static_cast<double>(bits.size());
    double v = 0.0;
    for (int b : bits) v += (b - m) * (b - m);
    return v;
}

}  // namespace

std::vector<MixPlan> generate_plans(Index n_layers, double target_bits, Strategy s,
                                    const std::vector<Index>& layer_params) {
    if (n_layers <= 0) throw ContractError("need at least one layer");
    if (target_bits < 2.0 || target_bits > 8.0)
        throw ContractError("target bits must lie in [2, 8]");

    const int n = static_cast<int>(n_layers);
    std::vector<MixPlan> plans;
    for (int a = 0; a <= n; ++a) {
        for (int b = 0; a + b <= n; ++b) {
            int c8 = n - a - b;
            MixPlan plan;
            plan.per_layer_bits = arrange(s, a, b, c8);
            plan.strategy = strategy_name(s);
            plan.effective_bits = effective_bits(plan.per_layer_bits, layer_params);
            plans.push_back(std::move(plan));
        }
    }

    std::stable_sort(plans.begin(), plans.end(), [&](const MixPlan& x, const MixPlan& y) {
        double dx = std::abs(x.effective_bits - target_bits);
        double dy = std::abs(y.effective_bits - target_bits);
        if (dx != dy) return dx < dy;
        if (x.effective_bits != y.effective_bits) return x.effective_bits < y.effective_bits;
        double sx = spread(x.per_layer_bits), sy = spread(y.per_layer_bits);
        if (sx != sy) return sx > sy;
        return x.per_layer_bits < y.per_layer_bits;
    });
    return plans;
}

std::vector<MixPlan> pareto_front(const std::vector<MixPlan>& plans) {
    for (const MixPlan& p : plans)
        if (!p.eval_loss) throw ContractError("pareto_front: all plans must be evaluated");
    std::vector<MixPlan> front;
    for (const MixPlan& p : plans) {
        bool dominated = false;
        for (const MixPlan& q : plans) {
            if (&p == &q) continue;
            bool no_worse = q.effective_bits <= p.effective_bits && *q.eval_loss <= *p.eval_loss;
            bool better = q.effective_bits < p.effective_bits || *q.eval_loss < *p.eval_loss;
            if (no_worse && better) {
                dominated = true;
                break;
            }
        }
        if (!dominated) front.push_back(p);
    }
    std::stable_sort(front.begin(), front.end(), [](const MixPlan& x, const MixPlan& y) {
        return x.effective_bits < y.effective_bits;
    });
    return front;
}

std::vector<Index> quantized_params_per_layer(const LoadedModel& lm) {
    std::vector<Index> counts(static_cast<size_t>(lm.model.config().n_layers), 0);
    for (const auto& [name, q] : lm.qweights) {
        if (name.rfind("layers.", 0) != 0) continue;
        size_t dot = name.find('.', 7);
        int layer = std::stoi(name.substr(7, dot - 7));
        counts[static_cast<size_t>(layer)] += q.numel();
    }
    return counts;
}

double evaluate_plan(const LoadedModel& lm, const MixPlan& plan, const std::vector<Batch>& batches,
                     SliceMode mode) {
    if (static_cast<Index>(plan.per_layer_bits.size()) != lm.model.config().n_layers)
        throw ContractError("plan length does not match model layer count");
    if (lm.slice_state.active()) throw ContractError("plan evaluation needs an unsliced checkpoint");
    std::map<std::string, int> bits;
    for (const auto& [name, q] : lm.qweights) {
        size_t dot = name.find('.', 7);
        int layer = std::stoi(name.substr(7, dot - 7));
        bits.emplace(name, plan.per_layer_bits[static_cast<size_t>(layer)]);
    }
    return eval_ce_quantized(lm.model, lm.qweights, lm.folds, bits, mode, batches);
}

}  // namespace matquant
