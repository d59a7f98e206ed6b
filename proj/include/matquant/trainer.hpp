#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "matquant/data.hpp"
#include "matquant/model.hpp"
#include "matquant/objectives.hpp"

namespace matquant {

enum class LrSchedule { constant, warmup_cosine };

struct OptimizerCfg {
    std::string name = "adam";  // "adam" | "sgd"
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    int steps = 0;
    Index batch_size = 8;
    Index seq_len = 32;
    double lr = 1e-3;
    LrSchedule lr_schedule = LrSchedule::constant;
    int warmup_steps = 0;  // warmup_cosine only; 0 picks steps/20
    OptimizerCfg optimizer;
    uint64_t seed = 0;
    int eval_every = 50;
    int eval_batches = 4;
    double clip_norm = 0.0;  // global-norm gradient clip; 0 disables

    void validate() const;
    double lr_at(int step) const;
};

struct RunRecord {
    int step = 0;
    double train_loss = 0.0;
    std::map<int, double> eval_ce;  // keyed by precision; 0 = float eval
    double wall_ms = 0.0;           // timestamp-ish; excluded from determinism checks
};

// Adam/SGD over a fixed set of named parameters.
class Optimizer {
  public:
    Optimizer(OptimizerCfg cfg, std::vector<std::pair<std::string, Param*>> params);

    void step(double lr, double clip_norm = 0.0);
    void zero_grads();

  private:
    OptimizerCfg cfg_;
    std::vector<std::pair<std::string, Param*>> params_;
    std::map<std::string, std::pair<Tensor, Tensor>> moments_;
    int64_t t_ = 0;
};

// ---- evaluation ----

// Cross-entropy on fixed batches with quant-scope weights quantized at c and
// sliced to r through the canonical integer path; r == c means no slicing
// beyond quantization, c == 0 means float evaluation.
double eval_ce_sliced(const ToyModel& model, const std::vector<Batch>& batches, int c, int r,
                      SliceMode mode = SliceMode::plain);
double eval_ce_float(const ToyModel& model, const std::vector<Batch>& batches);

// Evaluation from already-materialized codes (checkpoints, Mix´n´Match):
// per-weight slice targets; names absent from bits_per_name stay at c bits.
double eval_ce_quantized(const ToyModel& skeleton,
                         const std::map<std::string, QuantizedTensor>& qweights,
                         const std::map<std::string, FoldedProjAux>& folds,
                         const std::map<std::string, int>& bits_per_name, SliceMode mode,
                         const std::vector<Batch>& batches);

// ---- training loops ----

// Plain float pretraining (stands in for the pretrained model the
// quantization phase starts from).
std::vector<RunRecord> pretrain_float(ToyModel& model, const Corpus& corpus,
                                      const TrainConfig& cfg);

// End-to-end QAT-style training of the multi-precision objective. Evaluates
// every precision in R by slicing (never an independent quantizer).
std::vector<RunRecord> train_matquant(ToyModel& model, const Corpus& corpus,
                                      const TrainConfig& cfg, const MatQuantConfig& mq);

struct OmniLayerReport {
    int layer = 0;
    double init_loss = 0.0;
    double final_loss = 0.0;
    bool kept_init = false;  // training diverged; aux reset to identity
};

struct OmniTrainResult {
    OmniAux aux;
    std::vector<OmniLayerReport> layers;
};

// Per-layer auxiliary training against captured activations; model weights
// are never mutated.
OmniTrainResult train_omniquant_layerwise(const ToyModel& model,
                                          const std::vector<std::vector<Tensor>>& activations,
                                          const TrainConfig& cfg, const MatQuantConfig& mq);

// JSONL encoding of one record (single line, no trailing newline).
std::string run_record_json(const RunRecord& rec);

}  // namespace matquant
