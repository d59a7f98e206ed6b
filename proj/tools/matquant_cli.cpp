// Command-line driver: pretraining, quantized training, slicing, evaluation,
// Mix'n'Match planning and code histograms over MATQ checkpoints.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "matquant/mixnmatch.hpp"
#include "matquant/packing.hpp"
#include "matquant/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace matquant;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitFormat = 4;

// Fail fast on unknown keys so a typo cannot silently drop a lambda.
void require_keys(const json& obj, const std::string& where, const std::set<std::string>& allowed) {
    if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : obj.items())
        if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

ModelConfig parse_model(const json& j) {
    require_keys(j, "model", {"vocab", "d_model", "d_ff", "n_layers", "quant_scope", "seed"});
    ModelConfig cfg;
    cfg.vocab = j.value("vocab", cfg.vocab);
    cfg.d_model = j.value("d_model", cfg.d_model);
    cfg.d_ff = j.value("d_ff", cfg.d_ff);
    cfg.n_layers = j.value("n_layers", cfg.n_layers);
    if (j.contains("quant_scope")) {
        std::string s = j["quant_scope"].get<std::string>();
        if (s == "ffn_only")
            cfg.quant_scope = QuantScope::ffn_only;
        else if (s == "ffn_and_attention")
            cfg.quant_scope = QuantScope::ffn_and_attention;
        else
            throw ConfigError("unknown quant_scope: " + s);
    }
    cfg.seed = j.value("seed", cfg.seed);
    cfg.validate();
    return cfg;
}

TrainConfig parse_train(const json& j) {
    require_keys(j, "train",
                 {"steps", "batch_size", "seq_len", "lr", "lr_schedule", "warmup_steps",
                  "optimizer", "seed", "eval_every", "eval_batches", "clip_norm"});
    TrainConfig cfg;
    cfg.steps = j.value("steps", cfg.steps);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.seq_len = j.value("seq_len", cfg.seq_len);
    cfg.lr = j.value("lr", cfg.lr);
    if (j.contains("lr_schedule")) {
        std::string s = j["lr_schedule"].get<std::string>();
        if (s == "constant")
            cfg.lr_schedule = LrSchedule::constant;
        else if (s == "warmup_cosine")
            cfg.lr_schedule = LrSchedule::warmup_cosine;
        else
            throw ConfigError("unknown lr_schedule: " + s);
    }
    cfg.warmup_steps = j.value("warmup_steps", cfg.warmup_steps);
    if (j.contains("optimizer")) {
        require_keys(j["optimizer"], "train.optimizer", {"name", "beta1", "beta2", "eps"});
        cfg.optimizer.name = j["optimizer"].value("name", cfg.optimizer.name);
        cfg.optimizer.beta1 = j["optimizer"].value("beta1", cfg.optimizer.beta1);
        cfg.optimizer.beta2 = j["optimizer"].value("beta2", cfg.optimizer.beta2);
        cfg.optimizer.eps = j["optimizer"].value("eps", cfg.optimizer.eps);
    }
    cfg.seed = j.value("seed", cfg.seed);
    cfg.eval_every = j.value("eval_every", cfg.eval_every);
    cfg.eval_batches = j.value("eval_batches", cfg.eval_batches);
    cfg.clip_norm = j.value("clip_norm", cfg.clip_norm);
    cfg.validate();
    return cfg;
}

SliceMode parse_mode(const std::string& s) {
    if (s == "plain") return SliceMode::plain;
    if (s == "extra") return SliceMode::extra;
    throw ConfigError("mode must be 'plain' or 'extra'");
}

MatQuantConfig parse_objective(const json& j, BaseAlgo base) {
    require_keys(j, "objective",
                 {"bits", "c", "precisions", "lambdas", "slice_mode", "codistill",
                  "config_string"});
    MatQuantConfig cfg;
    cfg.base = base;
    if (j.contains("bits")) {
        // Baseline form: a single explicitly-trained precision with its own
        // quantizer (c == r, so slicing is the identity).
        int bits = j["bits"].get<int>();
        cfg.c = bits;
        cfg.precisions = {bits};
        cfg.lambdas = {{bits, 1.0}};
        cfg.validate();
        return cfg;
    }
    if (j.contains("config_string")) {
        cfg = MatQuantConfig::from_string(j["config_string"].get<std::string>());
        cfg.base = base;
    }
    cfg.c = j.value("c", cfg.c);
    if (j.contains("precisions")) cfg.precisions = j["precisions"].get<std::vector<int>>();
    if (j.contains("lambdas")) {
        cfg.lambdas.clear();
        for (const auto& [key, value] : j["lambdas"].items())
            cfg.lambdas[std::stoi(key)] = value.get<double>();
    }
    if (j.contains("slice_mode")) cfg.slice_mode = parse_mode(j["slice_mode"].get<std::string>());
    if (j.contains("codistill") && j["codistill"].is_array()) {
        for (const json& e : j["codistill"]) {
            require_keys(e, "codistill edge", {"teacher", "student", "combine", "lambda"});
            DistillEdge edge;
            edge.teacher_bits = e.at("teacher").get<int>();
            edge.student_bits = e.at("student").get<int>();
            if (e.contains("combine")) {
                std::string c = e["combine"].get<std::string>();
                if (c == "standalone")
                    edge.combine = DistillCombine::standalone;
                else if (c == "with_ground_truth")
                    edge.combine = DistillCombine::with_ground_truth;
                else
                    throw ConfigError("unknown combine: " + c);
            }
            edge.lambda = e.value("lambda", edge.lambda);
            cfg.codistill.push_back(edge);
        }
    }
    cfg.validate();
    return cfg;
}

std::string resolve_data_path(const json& cfg) {
    if (cfg.contains("data")) return cfg["data"].get<std::string>();
    if (const char* env = std::getenv("MATQUANT_DATA_DIR"))
        return std::string(env) + "/corpus.txt";
    return "data/corpus.txt";
}

void load_weights_from(ToyModel& model, const Checkpoint& ckpt) {
    LoadedModel lm = instantiate(ckpt);
    if (!(lm.model.config().vocab == model.config().vocab &&
          lm.model.config().d_model == model.config().d_model &&
          lm.model.config().d_ff == model.config().d_ff &&
          lm.model.config().n_layers == model.config().n_layers))
        throw ConfigError("init_checkpoint model dimensions do not match the config");
    for (auto& [name, p] : model.params()) p.value = lm.model.param(name).value;
}

void write_run_log(const std::string& path, const std::vector<RunRecord>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write run log: " + path);
    for (const RunRecord& rec : records) out << run_record_json(rec) << "\n";
}

int cmd_train(const std::string& config_path, const std::string& out_dir, int64_t seed_override) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("missing config file: " + config_path);
    json cfg;
    try {
        cfg = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    require_keys(cfg, "config",
                 {"schema_version", "kind", "model", "train", "objective", "init_checkpoint",
                  "data", "calibration_batches"});
    if (cfg.value("schema_version", 1) != 1) throw ConfigError("unsupported schema_version");
    std::string kind = cfg.at("kind").get<std::string>();

    ModelConfig mc = parse_model(cfg.value("model", json::object()));
    TrainConfig tc = parse_train(cfg.value("train", json::object()));
    if (seed_override >= 0) {
        tc.seed = static_cast<uint64_t>(seed_override);
        mc.seed = static_cast<uint64_t>(seed_override);
    }
    Corpus corpus = load_corpus(resolve_data_path(cfg));
    if (corpus.n_symbols > mc.vocab)
        throw ConfigError("corpus has more symbols than the model vocab");

    ToyModel model(mc);
    if (cfg.contains("init_checkpoint"))
        load_weights_from(model, read_checkpoint(cfg["init_checkpoint"].get<std::string>()));

    fs::create_directories(out_dir);
    std::vector<RunRecord> records;
    Checkpoint ckpt;

    if (kind == "pretrain") {
        records = pretrain_float(model, corpus, tc);
        ckpt = make_float_checkpoint(
            model, make_meta(model, "float", 0, tc.batch_size, tc.seq_len, tc.eval_batches));
    } else if (kind == "baseline" || kind == "matquant") {
        if (!cfg.contains("init_checkpoint"))
            throw ConfigError(kind + " training requires init_checkpoint (a pretrained model)");
        MatQuantConfig mq = parse_objective(cfg.at("objective"), BaseAlgo::qat);
        records = train_matquant(model, corpus, tc, mq);
        ckpt = make_qat_checkpoint(
            model, mq.c, make_meta(model, "qat", mq.c, tc.batch_size, tc.seq_len, tc.eval_batches));
    } else if (kind == "omniquant") {
        if (!cfg.contains("init_checkpoint"))
            throw ConfigError("omniquant training requires init_checkpoint (a pretrained model)");
        MatQuantConfig mq = parse_objective(cfg.at("objective"), BaseAlgo::block_recon);
        int calib = cfg.value("calibration_batches", 4);
        Rng rng(tc.seed + 7919);
        std::vector<Batch> batches;
        for (int i = 0; i < calib; ++i)
            batches.push_back(sample_batch(corpus, tc.batch_size, tc.seq_len, rng));
        auto acts = model.capture_activations(batches);
        OmniTrainResult result = train_omniquant_layerwise(model, acts, tc, mq);
        for (const OmniLayerReport& rep : result.layers) {
            RunRecord rec;
            rec.step = rep.layer;
            rec.train_loss = rep.final_loss;
            rec.eval_ce[0] = rep.init_loss;
            records.push_back(rec);
            if (rep.kept_init)
                std::cerr << "warning: layer " << rep.layer
                          << " reconstruction diverged; keeping identity aux\n";
        }
        ckpt = make_omniquant_checkpoint(
            model, result.aux, mq.c,
            make_meta(model, "omniquant", mq.c, tc.batch_size, tc.seq_len, tc.eval_batches));
    } else {
        throw ConfigError("unknown kind: " + kind);
    }

    write_checkpoint(out_dir + "/checkpoint.matq", ckpt);
    write_run_log(out_dir + "/run.jsonl", records);
    std::cout << "wrote " << out_dir << "/checkpoint.matq\n";
    return kExitOk;
}

json eval_metrics(const LoadedModel& lm, const Corpus& corpus, int bits, SliceMode mode) {
    if (lm.c == 0) throw ConfigError("eval requires a quantized checkpoint");
    if (bits > lm.c) throw ConfigError("requested bits exceed the checkpoint bit-width");
    if (lm.slice_state.active() && lm.slice_state.r != bits)
        throw ConfigError("checkpoint is pre-sliced at a different bit-width");

    std::vector<Batch> batches = eval_batches(corpus, lm.batch_size, lm.seq_len, lm.eval_batches);
    std::map<std::string, int> per_name;
    for (const auto& [name, q] : lm.qweights) per_name.emplace(name, bits);
    double ce = eval_ce_quantized(lm.model, lm.qweights, lm.folds, per_name, mode, batches);

    json out{{"bits", bits},
             {"mode", mode == SliceMode::extra ? "extra" : "plain"},
             {"eval_ce", ce},
             {"ppl", std::exp(ce)}};
    if (mode == SliceMode::extra) {
        int64_t overflow = 0, total = 0;
        for (const auto& [name, q] : lm.qweights) {
            QuantizedTensor s = q.slice_state.active()
                                    ? q
                                    : slice_extra(q, SliceSpec{q.params.c, bits, SliceMode::extra});
            overflow += static_cast<int64_t>(overflow_fraction(s) *
                                             static_cast<double>(s.numel()) +
                                             0.5);
            total += s.numel();
        }
        double frac = static_cast<double>(overflow) / static_cast<double>(total);
        out["overflow_fraction"] = frac;
        out["effective_bits"] = static_cast<double>(bits) + frac;
    }
    return out;
}

int cmd_eval(const std::string& ckpt_path, int bits, const std::string& mode_str,
             const std::string& data_dir, const std::string& out_path) {
    LoadedModel lm = instantiate(read_checkpoint(ckpt_path));
    std::string data = data_dir.empty()
                           ? (std::getenv("MATQUANT_DATA_DIR")
                                  ? std::string(std::getenv("MATQUANT_DATA_DIR")) + "/corpus.txt"
                                  : "data/corpus.txt")
                           : data_dir + "/corpus.txt";
    Corpus corpus = load_corpus(data);
    json out = eval_metrics(lm, corpus, bits, parse_mode(mode_str));
    std::cout << out.dump(2) << "\n";
    if (!out_path.empty()) {
        std::ofstream f(out_path, std::ios::trunc);
        f << out.dump(2) << "\n";
    }
    return kExitOk;
}

int cmd_slice(const std::string& ckpt_path, int bits, const std::string& mode_str,
              const std::string& out_path) {
    Checkpoint sliced = load_sliced_file(ckpt_path, bits, parse_mode(mode_str));
    write_checkpoint(out_path, sliced);
    std::cout << "wrote " << out_path << "\n";
    return kExitOk;
}

int cmd_mixnmatch(const std::string& ckpt_path, const std::string& strategy,
                  std::vector<double> targets, const std::string& data_dir,
                  const std::string& out_dir, int jobs) {
    LoadedModel lm = instantiate(read_checkpoint(ckpt_path));
    if (lm.c == 0 || lm.slice_state.active())
        throw ConfigError("mixnmatch requires an unsliced quantized checkpoint");
    std::string data = data_dir.empty()
                           ? (std::getenv("MATQUANT_DATA_DIR")
                                  ? std::string(std::getenv("MATQUANT_DATA_DIR")) + "/corpus.txt"
                                  : "data/corpus.txt")
                           : data_dir + "/corpus.txt";
    Corpus corpus = load_corpus(data);
    std::vector<Batch> batches = eval_batches(corpus, lm.batch_size, lm.seq_len, lm.eval_batches);
    std::vector<Index> layer_params = quantized_params_per_layer(lm);

    std::vector<Strategy> strategies =
        strategy == "all" ? all_strategies() : std::vector<Strategy>{strategy_from_string(strategy)};
    if (targets.empty()) targets = {2, 3, 4, 5, 6, 8};

    std::vector<MixPlan> picks;
    for (Strategy s : strategies)
        for (double t : targets) {
            auto plans = generate_plans(lm.model.config().n_layers, t, s, layer_params);
            picks.push_back(plans.front());
        }

    // Plan evaluations are pure; spread them over worker threads.
    std::vector<std::thread> workers;
    std::atomic<size_t> next{0};
    int n_workers = std::max(1, jobs);
    for (int w = 0; w < n_workers; ++w)
        workers.emplace_back([&]() {
            for (size_t i = next.fetch_add(1); i < picks.size(); i = next.fetch_add(1))
                picks[i].eval_loss = evaluate_plan(lm, picks[i], batches);
        });
    for (auto& t : workers) t.join();

    fs::create_directories(out_dir);
    std::ofstream csv(out_dir + "/mixnmatch.csv", std::ios::trunc);
    csv << "strategy,effective_bits,eval_ce\n";
    csv.precision(17);
    for (const MixPlan& p : picks)
        csv << p.strategy << "," << p.effective_bits << "," << *p.eval_loss << "\n";

    std::vector<MixPlan> front = pareto_front(picks);
    json jf = json::array();
    for (const MixPlan& p : front)
        jf.push_back(json{{"strategy", p.strategy},
                          {"per_layer_bits", p.per_layer_bits},
                          {"effective_bits", p.effective_bits},
                          {"eval_ce", *p.eval_loss}});
    std::ofstream pf(out_dir + "/pareto.json", std::ios::trunc);
    pf << jf.dump(2) << "\n";
    std::cout << "wrote " << out_dir << "/mixnmatch.csv and pareto.json\n";
    return kExitOk;
}

int cmd_histogram(const std::string& ckpt_path, int bits, const std::string& mode_str,
                  const std::string& out_path) {
    LoadedModel lm = instantiate(read_checkpoint(ckpt_path));
    if (lm.c == 0) throw ConfigError("histogram requires a quantized checkpoint");
    SliceMode mode = parse_mode(mode_str);
    const size_t buckets = (1u << bits) + (mode == SliceMode::extra ? 1 : 0);

    Index n_layers = lm.model.config().n_layers;
    std::vector<std::vector<int64_t>> per_layer(static_cast<size_t>(n_layers),
                                                std::vector<int64_t>(buckets, 0));
    std::vector<int64_t> total(buckets, 0);
    for (const auto& [name, q] : lm.qweights) {
        QuantizedTensor s = q;
        if (!q.slice_state.active() && bits != q.params.c)
            s = mode == SliceMode::extra ? slice_extra(q, SliceSpec{q.params.c, bits, mode})
                                         : slice(q, SliceSpec{q.params.c, bits, mode});
        auto counts = code_histogram(s, bits);
        size_t dot = name.find('.', 7);
        int layer = std::stoi(name.substr(7, dot - 7));
        for (size_t k = 0; k < counts.size(); ++k) {
            per_layer[static_cast<size_t>(layer)][k] += counts[k];
            total[k] += counts[k];
        }
    }

    auto mean_bucket = [](const std::vector<int64_t>& counts) {
        double num = 0.0, den = 0.0;
        for (size_t k = 0; k < counts.size(); ++k) {
            num += static_cast<double>(k) * static_cast<double>(counts[k]);
            den += static_cast<double>(counts[k]);
        }
        return den > 0 ? num / den : 0.0;
    };

    std::ostream* os = &std::cout;
    std::ofstream file;
    if (!out_path.empty()) {
        file.open(out_path, std::ios::trunc);
        os = &file;
    }
    *os << "layer";
    for (size_t k = 0; k < (1u << bits); ++k) *os << ",bucket_" << k;
    if (mode == SliceMode::extra) *os << ",overflow";
    *os << ",mean_bucket\n";
    os->precision(17);
    for (Index l = 0; l < n_layers; ++l) {
        *os << l;
        for (int64_t c : per_layer[static_cast<size_t>(l)]) *os << "," << c;
        *os << "," << mean_bucket(per_layer[static_cast<size_t>(l)]) << "\n";
    }
    *os << "all";
    for (int64_t c : total) *os << "," << c;
    *os << "," << mean_bucket(total) << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Nested-integer quantization toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", ckpt_path, mode = "plain", data_dir, out_path;
    std::string strategy = "all";
    int bits = 8;
    int jobs = 1;
    int64_t seed_override = -1;
    uint64_t gen_seed = 42;
    size_t gen_bytes = 294912;
    std::vector<double> targets;

    CLI::App* train = app.add_subcommand("train", "run a training config");
    train->add_option("--config", config_path, "JSON config")->required();
    train->add_option("--out", out_dir, "output directory");
    train->add_option("--seed", seed_override, "override model+train seed");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint at a bit-width");
    eval->add_option("--ckpt", ckpt_path)->required();
    eval->add_option("--bits", bits)->required();
    eval->add_option("--mode", mode, "plain|extra");
    eval->add_option("--data", data_dir, "corpus directory");
    eval->add_option("--out", out_path, "also write metrics JSON here");

    CLI::App* slice_cmd = app.add_subcommand("slice", "write a sliced checkpoint");
    slice_cmd->add_option("--ckpt", ckpt_path)->required();
    slice_cmd->add_option("--bits", bits)->required();
    slice_cmd->add_option("--mode", mode, "plain|extra");
    slice_cmd->add_option("--out", out_path)->required();

    CLI::App* mixn = app.add_subcommand("mixnmatch", "plan + evaluate mixed precisions");
    mixn->add_option("--ckpt", ckpt_path)->required();
    mixn->add_option("--strategy", strategy, "all|pyramid|reverse_pyramid|increasing|decreasing");
    mixn->add_option("--targets", targets, "target effective bits");
    mixn->add_option("--data", data_dir, "corpus directory");
    mixn->add_option("--out", out_dir, "output directory");
    mixn->add_option("--jobs", jobs, "parallel plan evaluations");

    CLI::App* hist = app.add_subcommand("histogram", "code histogram CSV");
    hist->add_option("--ckpt", ckpt_path)->required();
    hist->add_option("--bits", bits)->required();
    hist->add_option("--mode", mode, "plain|extra");
    hist->add_option("--out", out_path, "CSV path (default stdout)");

    CLI::App* gen = app.add_subcommand("gen-corpus", "regenerate the training corpus");
    gen->add_option("--out", out_path)->required();
    gen->add_option("--seed", gen_seed);
    gen->add_option("--bytes", gen_bytes);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (train->parsed()) return cmd_train(config_path, out_dir, seed_override);
        if (eval->parsed()) return cmd_eval(ckpt_path, bits, mode, data_dir, out_path);
        if (slice_cmd->parsed()) return cmd_slice(ckpt_path, bits, mode, out_path);
        if (mixn->parsed())
            return cmd_mixnmatch(ckpt_path, strategy, targets, data_dir, out_dir, jobs);
        if (hist->parsed()) return cmd_histogram(ckpt_path, bits, mode, out_path);
        if (gen->parsed()) {
            std::string text = generate_markov_text(gen_seed, gen_bytes);
            fs::path p(out_path);
            if (p.has_parent_path()) fs::create_directories(p.parent_path());
            std::ofstream f(out_path, std::ios::binary | std::ios::trunc);
            f << text;
            std::cout << "wrote " << out_path << " (" << text.size() << " bytes)\n";
            return kExitOk;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ContractError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitConfig;
}
