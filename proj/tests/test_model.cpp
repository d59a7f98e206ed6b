#include "doctest.h"

#include <cmath>

#include "matquant/model.hpp"
#include "matquant/quant.hpp"

using namespace matquant;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab = 16;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.n_layers = 2;
    cfg.seed = 3;
    return cfg;
}

std::vector<int> tokens_mod(Index batch, Index seq, Index vocab) {
    std::vector<int> t(static_cast<size_t>(batch * seq));
    for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<int>(i % vocab);
    return t;
}

}  // namespace

TEST_CASE("parameter count formula matches the actual parameters") {
    ToyModel model(tiny_config());
    Index total = 0;
    for (const auto& [name, p] : model.params()) total += p.value.numel();
    CHECK(total == model.param_count());

    ModelConfig big;
    big.quant_scope = QuantScope::ffn_and_attention;
    ToyModel model2(big);
    total = 0;
    for (const auto& [name, p] : model2.params()) total += p.value.numel();
    CHECK(total == model2.param_count());
}

TEST_CASE("quant scope picks the right matrices") {
    ToyModel ffn(tiny_config());
    auto names = ffn.quant_target_names();
    CHECK(names.size() == 6);  // 3 FFN mats x 2 layers
    for (const auto& n : names) CHECK(n.find("w_") != std::string::npos);

    ModelConfig cfg = tiny_config();
    cfg.quant_scope = QuantScope::ffn_and_attention;
    ToyModel both(cfg);
    CHECK(both.quant_target_names().size() == 14);  // + wq/wk/wv/wo x 2 layers
}

TEST_CASE("zero-initialized head yields the uniform distribution") {
    ToyModel model(tiny_config());
    Tape tape(false);
    Var logits = model.forward(tape, tokens_mod(2, 4, 16), 2, 4, {});
    Var ce = softmax_xent(logits, tokens_mod(2, 4, 16));
    CHECK(ce.value()[0] == doctest::Approx(std::log(16.0)).epsilon(1e-12));
}

TEST_CASE("forward is deterministic and rejects bad tokens") {
    ToyModel a(tiny_config());
    ToyModel b(tiny_config());
    auto toks = tokens_mod(2, 6, 16);
    Tape ta(false), tb(false);
    Tensor la = a.forward(ta, toks, 2, 6, {}).value();
    Tensor lb = b.forward(tb, toks, 2, 6, {}).value();
    for (Index i = 0; i < la.numel(); ++i) CHECK(la[i] == lb[i]);

    std::vector<int> bad = toks;
    bad[0] = 16;
    Tape tc(false);
    CHECK_THROWS_AS(a.forward(tc, bad, 2, 6, {}), ContractError);
}

TEST_CASE("full forward equals the composition of layer forwards") {
    ToyModel model(tiny_config());
    auto toks = tokens_mod(2, 5, 16);
    Tape tape(false);
    Var h = model.embed_stage(tape, toks, 2, 5);
    Tensor x({2, 5, 8}, h.value().array());
    for (int l = 0; l < 2; ++l) {
        Tape lt(false);
        Var out = model.layer_forward(lt, l, lt.constant(x), 2, 5, {});
        x = Tensor({2, 5, 8}, out.value().array());
    }
    Tape ft(false);
    // Apply the final norm + head to the composed activations.
    Var composed = ft.constant(Tensor({10, 8}, x.array()));
    Var normed = rmsnorm(composed, ft.constant(model.param("out_norm").value));
    Tensor via_layers = matmul(normed, ft.constant(model.param("head").value)).value();

    Tape tape2(false);
    Tensor direct = model.forward(tape2, toks, 2, 5, {}).value();
    for (Index i = 0; i < direct.numel(); ++i)
        CHECK(via_layers[i] == doctest::Approx(direct[i]).epsilon(1e-5));
}

TEST_CASE("layer_forward with float override matches the plain layer") {
    ToyModel model(tiny_config());
    auto toks = tokens_mod(1, 4, 16);
    Tape tape(false);
    Tensor x({1, 4, 8}, model.embed_stage(tape, toks, 1, 4).value().array());

    Tensor plain = model.layer_forward_override(0, x, {});
    std::map<std::string, Tensor> override;
    override.emplace("layers.0.w_gate", model.param("layers.0.w_gate").value);
    Tensor same = model.layer_forward_override(0, x, override);
    for (Index i = 0; i < plain.numel(); ++i) CHECK(plain[i] == same[i]);

    // Quantized override stays finite and close-ish at 8 bits.
    Tensor wq = dequantize(minmax_quantize(model.param("layers.0.w_gate").value, 8, 1));
    std::map<std::string, Tensor> qov;
    qov.emplace("layers.0.w_gate", wq);
    Tensor quant = model.layer_forward_override(0, x, qov);
    double l2 = 0.0;
    for (Index i = 0; i < plain.numel(); ++i) l2 += (plain[i] - quant[i]) * (plain[i] - quant[i]);
    CHECK(std::isfinite(l2));
    CHECK(l2 > 0.0);
    CHECK(l2 < 1.0);

    std::map<std::string, Tensor> badov;
    badov.emplace("layers.0.w_gate", Tensor::zeros({2, 2}));
    CHECK_THROWS_AS(model.layer_forward_override(0, x, badov), DimensionError);
}

TEST_CASE("zero layer input produces only the bias path") {
    ToyModel model(tiny_config());
    // Give the FFN biases nonzero values so the bias path is visible.
    model.param("layers.0.b_gate").value.array().setConstant(0.3);
    model.param("layers.0.b_up").value.array().setConstant(-0.2);
    model.param("layers.0.b_down").value.array().setConstant(0.1);

    Tensor x = Tensor::zeros({1, 3, 8});
    Tensor out = model.layer_forward_override(0, x, {});

    // Expected: silu(b_gate) * b_up through w_down, plus b_down.
    Tape tape(false);
    Var gate = tape.constant(Tensor::full({1, 16}, 0.3));
    Var up = tape.constant(Tensor::full({1, 16}, -0.2));
    Var act = mul(silu(gate), up);
    Var down = add_rowvec(matmul(act, tape.constant(model.param("layers.0.w_down").value)),
                          tape.constant(model.param("layers.0.b_down").value));
    const Tensor& row = down.value();
    for (Index t = 0; t < 3; ++t)
        for (Index j = 0; j < 8; ++j)
            CHECK(out[t * 8 + j] == doctest::Approx(row[j]).epsilon(1e-12));
}

TEST_CASE("capture_activations records the embedding output as X_0") {
    ModelConfig cfg = tiny_config();
    cfg.vocab = 32;  // corpus alphabet has 30 symbols
    ToyModel model(cfg);
    Rng rng(9);
    std::string text = generate_markov_text(5, 4096);
    Corpus corpus = corpus_from_bytes(text);
    std::vector<Batch> batches{sample_batch(corpus, 2, 4, rng)};

    auto acts = model.capture_activations(batches);
    REQUIRE(acts.size() == 2);
    REQUIRE(acts[0].size() == 1);
    CHECK(acts[0][0].shape() == std::vector<Index>{2, 4, 8});
    CHECK(acts[1][0].shape() == std::vector<Index>{2, 4, 8});

    Tape tape(false);
    Tensor embed = model.embed_stage(tape, batches[0].inputs, 2, 4).value();
    for (Index i = 0; i < embed.numel(); ++i) CHECK(acts[0][0][i] == embed[i]);

    auto again = model.capture_activations(batches);
    for (Index i = 0; i < embed.numel(); ++i) CHECK(again[1][0][i] == acts[1][0][i]);
}

TEST_CASE("cross-entropy gradients reach FFN weights (no quantization)") {
    ModelConfig cfg = tiny_config();
    cfg.n_layers = 1;
    ToyModel model(cfg);
    auto toks = tokens_mod(1, 4, 16);
    // Give the head nonzero values so gradients into the body are nonzero.
    Rng rng(4);
    model.param("head").value = Tensor::randn({8, 16}, rng, 0.3);

    const Tensor w0 = model.param("layers.0.w_gate").value;
    auto f = [&](Tape& t, Var x) -> Var {
        ForwardHooks hooks;
        hooks.weight = [&](Tape& tt, const std::string& name, Param& p) -> Var {
            if (name == "layers.0.w_gate") return x;
            return tt.constant(p.value);
        };
        return softmax_xent(model.forward(t, toks, 1, 4, hooks), toks);
    };
    CHECK(grad_check(f, w0) < 1e-4);
}
