#pragma once

#include <optional>
#include <string>
#include <vector>

#include "matquant/packing.hpp"

namespace matquant {

enum class Strategy { pyramid, reverse_pyramid, increasing, decreasing };

Strategy strategy_from_string(const std::string& name);
std::string strategy_name(Strategy s);
std::vector<Strategy> all_strategies();

// Per-layer precision assignment with its cost in parameter-weighted bits.
struct MixPlan {
    std::vector<int> per_layer_bits;  // entries in {2, 4, 8}
    std::string strategy;
    double effective_bits = 0.0;
    std::optional<double> eval_loss;
};

// Parameter-weighted mean bit-width; empty layer_params means equal layers.
double effective_bits(const std::vector<int>& bits, const std::vector<Index>& layer_params = {});

// Extra-precision accounting: each overflowed weight pays one extra bit.
// Sparse-index overhead is deliberately excluded.
double effective_bits_extra(const std::vector<int>& bits, const std::vector<double>& overflow,
                            const std::vector<Index>& layer_params = {});

// All assignments of a strategy family over {2,4,8}, best match first.
// Ordering: |effective - target|, then fewer total bits, then more spread
// (the most strategy-typical shape), then lexicographic. The four families
// share count multisets, so matched effective bits exist across strategies.
std::vector<MixPlan> generate_plans(Index n_layers, double target_bits, Strategy s,
                                    const std::vector<Index>& layer_params = {});

// Non-dominated subset in (effective_bits down, eval_loss down), sorted by
// bits. All plans must carry eval_loss.
std::vector<MixPlan> pareto_front(const std::vector<MixPlan>& plans);

// Quantized parameter count per layer of a loaded checkpoint.
std::vector<Index> quantized_params_per_layer(const LoadedModel& lm);

// Held-out cross-entropy of the model with each layer's weights sliced to
// the plan's bits. Requires an unsliced checkpoint trained at c bits.
double evaluate_plan(const LoadedModel& lm, const MixPlan& plan, const std::vector<Batch>& batches,
                     SliceMode mode = SliceMode::plain);

}  // namespace matquant
