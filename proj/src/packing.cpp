#include "matquant/packing.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "matquant/objectives.hpp"

namespace matquant {

namespace {

constexpr char kMagic[4] = {'M', 'A', 'T', 'Q'};
constexpr uint16_t kVersion = 1;
constexpr uint8_t kAxisPerTensor = 0xFF;

// ---- little-endian primitives ----

void put_u8(std::vector<uint8_t>& out, uint8_t v) { out.push_back(v); }

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xFF));
    out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::vector<uint8_t>& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

void put_f64(std::vector<uint8_t>& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

struct Reader {
    const uint8_t* p;
    size_t n;
    size_t at = 0;

    void need(size_t k) const {
        if (at + k > n) throw FormatError("truncated checkpoint payload");
    }
    uint8_t u8() {
        need(1);
        return p[at++];
    }
    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint16_t>(p[at] | (p[at + 1] << 8));
        at += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[at + i]) << (8 * i);
        at += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[at + i]) << (8 * i);
        at += 8;
        return v;
    }
    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str(size_t k) {
        need(k);
        std::string s(reinterpret_cast<const char*>(p + at), k);
        at += k;
        return s;
    }
    std::vector<uint8_t> bytes(size_t k) {
        need(k);
        std::vector<uint8_t> b(p + at, p + at + k);
        at += k;
        return b;
    }
};

}  // namespace

std::vector<uint8_t> pack_codes(const std::vector<uint16_t>& codes, int c) {
    std::vector<uint8_t> out((codes.size() * static_cast<size_t>(c) + 7) / 8, 0);
    size_t bit = 0;
    for (uint16_t code : codes) {
        for (int b = c - 1; b >= 0; --b) {
            if ((code >> b) & 1u) out[bit / 8] |= static_cast<uint8_t>(0x80u >> (bit % 8));
            ++bit;
        }
    }
    return out;
}

std::vector<uint16_t> unpack_codes(const std::vector<uint8_t>& bytes, size_t n_codes, int c) {
    if (bytes.size() < (n_codes * static_cast<size_t>(c) + 7) / 8)
        throw FormatError("truncated code payload");
    std::vector<uint16_t> codes(n_codes, 0);
    size_t bit = 0;
    for (size_t i = 0; i < n_codes; ++i) {
        uint16_t v = 0;
        for (int b = 0; b < c; ++b) {
            v = static_cast<uint16_t>((v << 1) |
                                      ((bytes[bit / 8] >> (7 - bit % 8)) & 1u));
            ++bit;
        }
        codes[i] = v;
    }
    return codes;
}

std::vector<uint8_t> write_overflow_sidecar(const QuantizedTensor& q) {
    if (!q.slice_state.active() || q.slice_state.mode != SliceMode::extra)
        throw ContractError("overflow sidecar requires an extra-precision sliced tensor");
    const uint16_t top = static_cast<uint16_t>(1u << q.params.c);
    std::vector<uint32_t> idx;
    for (size_t i = 0; i < q.codes.size(); ++i)
        if (q.codes[i] == top) idx.push_back(static_cast<uint32_t>(i));
    std::vector<uint8_t> out;
    put_u32(out, static_cast<uint32_t>(idx.size()));
    for (uint32_t i : idx) put_u32(out, i);
    return out;
}

std::vector<uint32_t> read_overflow_sidecar(const uint8_t* data, size_t size, size_t& consumed) {
    Reader r{data, size};
    uint32_t count = r.u32();
    std::vector<uint32_t> idx(count);
    for (uint32_t i = 0; i < count; ++i) idx[i] = r.u32();
    consumed = r.at;
    return idx;
}

std::vector<uint8_t> pack(const Checkpoint& ckpt) {
    for (const CheckpointTensor& t : ckpt.tensors) {
        if (!t.quantized) continue;
        if (ckpt.c == 0) throw ContractError("pack: quantized tensor in a float checkpoint");
        if (t.q.params.c != ckpt.c) throw ContractError("pack: mixed bit-widths");
        if (t.q.slice_state.r != ckpt.slice_state.r ||
            (t.q.slice_state.active() && t.q.slice_state.mode != ckpt.slice_state.mode))
            throw ContractError("pack: mixed slice states");
    }

    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u16(out, kVersion);
    put_u8(out, static_cast<uint8_t>(ckpt.c));
    put_u8(out, static_cast<uint8_t>(ckpt.slice_state.r));
    put_u8(out, static_cast<uint8_t>(ckpt.slice_state.mode));
    put_u8(out, 0);
    put_u32(out, static_cast<uint32_t>(ckpt.meta_json.size()));
    out.insert(out.end(), ckpt.meta_json.begin(), ckpt.meta_json.end());
    put_u32(out, static_cast<uint32_t>(ckpt.tensors.size()));

    const bool extra_sliced =
        ckpt.slice_state.active() && ckpt.slice_state.mode == SliceMode::extra;
    for (const CheckpointTensor& t : ckpt.tensors) {
        put_u16(out, static_cast<uint16_t>(t.name.size()));
        out.insert(out.end(), t.name.begin(), t.name.end());
        put_u8(out, t.quantized ? 1 : 0);
        const std::vector<Index>& shape = t.quantized ? t.q.shape : t.raw.shape();
        put_u8(out, static_cast<uint8_t>(shape.size()));
        if (t.quantized) {
            put_u8(out, t.q.params.axis == kPerTensor ? kAxisPerTensor
                                                      : static_cast<uint8_t>(t.q.params.axis));
        } else {
            put_u8(out, 0);
        }
        put_u8(out, 0);
        for (Index d : shape) put_u32(out, static_cast<uint32_t>(d));

        if (!t.quantized) {
            for (Index i = 0; i < t.raw.numel(); ++i) put_f64(out, t.raw[i]);
            continue;
        }
        put_u32(out, static_cast<uint32_t>(t.q.params.channels()));
        for (Index i = 0; i < t.q.params.channels(); ++i)
            put_f32(out, static_cast<float>(t.q.params.alpha[i]));
        for (Index i = 0; i < t.q.params.channels(); ++i)
            put_f32(out, static_cast<float>(t.q.params.z[i]));

        if (extra_sliced) {
            // Overflow codes exceed c bits; store the top plain bucket and
            // let the sidecar restore them.
            const uint16_t top = static_cast<uint16_t>(1u << ckpt.c);
            const uint16_t clamped =
                static_cast<uint16_t>(top - (1u << (ckpt.c - ckpt.slice_state.r)));
            std::vector<uint16_t> storable = t.q.codes;
            for (auto& code : storable)
                if (code == top) code = clamped;
            auto payload = pack_codes(storable, ckpt.c);
            out.insert(out.end(), payload.begin(), payload.end());
            auto sidecar = write_overflow_sidecar(t.q);
            out.insert(out.end(), sidecar.begin(), sidecar.end());
        } else {
            auto payload = pack_codes(t.q.codes, ckpt.c);
            out.insert(out.end(), payload.begin(), payload.end());
        }
    }
    return out;
}

Checkpoint unpack(const std::vector<uint8_t>& bytes) {
    Reader r{bytes.data(), bytes.size()};
    if (r.str(4) != std::string(kMagic, 4)) throw FormatError("bad magic; not a MATQ checkpoint");
    uint16_t version = r.u16();
    if (version != kVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));

    Checkpoint ckpt;
    ckpt.c = r.u8();
    ckpt.slice_state.r = r.u8();
    ckpt.slice_state.mode = static_cast<SliceMode>(r.u8());
    r.u8();
    ckpt.meta_json = r.str(r.u32());
    uint32_t n_tensors = r.u32();

    const bool extra_sliced =
        ckpt.slice_state.active() && ckpt.slice_state.mode == SliceMode::extra;
    for (uint32_t ti = 0; ti < n_tensors; ++ti) {
        CheckpointTensor t;
        t.name = r.str(r.u16());
        t.quantized = r.u8() != 0;
        uint8_t ndims = r.u8();
        uint8_t axis = r.u8();
        r.u8();
        std::vector<Index> shape(ndims);
        Index numel = 1;
        for (uint8_t d = 0; d < ndims; ++d) {
            shape[d] = static_cast<Index>(r.u32());
            numel *= shape[d];
        }

        if (!t.quantized) {
            Tensor raw(shape);
            for (Index i = 0; i < numel; ++i) raw[i] = r.f64();
            t.raw = std::move(raw);
        } else {
            uint32_t nch = r.u32();
            QuantParams p;
            p.c = ckpt.c;
            p.axis = axis == kAxisPerTensor ? kPerTensor : axis;
            p.alpha = Tensor::zeros({static_cast<Index>(nch)});
            p.z = Tensor::zeros({static_cast<Index>(nch)});
            for (uint32_t i = 0; i < nch; ++i) p.alpha[static_cast<Index>(i)] = r.f32();
            for (uint32_t i = 0; i < nch; ++i) p.z[static_cast<Index>(i)] = r.f32();
            auto payload =
                r.bytes((static_cast<size_t>(numel) * static_cast<size_t>(ckpt.c) + 7) / 8);
            t.q.shape = shape;
            t.q.params = std::move(p);
            t.q.codes = unpack_codes(payload, static_cast<size_t>(numel), ckpt.c);
            t.q.slice_state = ckpt.slice_state;
            if (extra_sliced) {
                size_t used = 0;
                auto idx = read_overflow_sidecar(r.p + r.at, r.n - r.at, used);
                r.at += used;
                const uint16_t top = static_cast<uint16_t>(1u << ckpt.c);
                for (uint32_t i : idx) {
                    if (i >= t.q.codes.size()) throw FormatError("overflow index out of range");
                    t.q.codes[i] = top;
                }
            }
        }
        ckpt.tensors.push_back(std::move(t));
    }
    return ckpt;
}

Checkpoint load_sliced(const std::vector<uint8_t>& bytes, int r, SliceMode mode) {
    Checkpoint ckpt = unpack(bytes);
    if (ckpt.c == 0) throw ContractError("load_sliced: float checkpoint has no codes");
    if (ckpt.slice_state.active()) throw ContractError("load_sliced: checkpoint already sliced");
    if (r > ckpt.c) throw ContractError("load_sliced: r exceeds stored bit-width");
    for (CheckpointTensor& t : ckpt.tensors) {
        if (!t.quantized) continue;
        SliceSpec spec{ckpt.c, r, mode};
        t.q = mode == SliceMode::extra ? slice_extra(t.q, spec) : slice(t.q, spec);
    }
    ckpt.slice_state = SliceState{r, mode};
    return ckpt;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::vector<uint8_t> bytes = pack(ckpt);
    std::filesystem::path target(path);
    if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
    std::filesystem::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot open for writing: " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FormatError("short write: " + tmp.string());
    }
    std::filesystem::rename(tmp, target);
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return unpack(bytes);
}

Checkpoint load_sliced_file(const std::string& path, int r, SliceMode mode) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return load_sliced(bytes, r, mode);
}

// ---- model adapters ----

std::string make_meta(const ToyModel& model, const std::string& kind, int c, Index batch_size,
                      Index seq_len, int eval_batches) {
    nlohmann::json j;
    j["kind"] = kind;
    j["c"] = c;
    j["model"] = model_config_to_json(model.config());
    j["eval"] = {{"batch_size", batch_size}, {"seq_len", seq_len}, {"eval_batches", eval_batches}};
    return j.dump();
}

Checkpoint make_float_checkpoint(const ToyModel& model, std::string meta) {
    Checkpoint ckpt;
    ckpt.c = 0;
    ckpt.meta_json = std::move(meta);
    for (const auto& [name, p] : model.params())
        ckpt.tensors.push_back(CheckpointTensor{name, false, p.value, {}});
    return ckpt;
}

Checkpoint make_qat_checkpoint(const ToyModel& model, int c, std::string meta) {
    Checkpoint ckpt;
    ckpt.c = c;
    ckpt.meta_json = std::move(meta);
    auto qweights = materialize_qat(model, c);
    for (const auto& [name, p] : model.params()) {
        auto it = qweights.find(name);
        if (it != qweights.end())
            ckpt.tensors.push_back(CheckpointTensor{name, true, {}, it->second});
        else
            ckpt.tensors.push_back(CheckpointTensor{name, false, p.value, {}});
    }
    return ckpt;
}

Checkpoint make_omniquant_checkpoint(const ToyModel& model, const OmniAux& aux, int c,
                                     std::string meta) {
    Checkpoint ckpt;
    ckpt.c = c;
    ckpt.meta_json = std::move(meta);
    OmniMaterialized m = materialize_omniquant(model, aux, c);
    for (const auto& [name, p] : model.params()) {
        auto it = m.qweights.find(name);
        if (it != m.qweights.end())
            ckpt.tensors.push_back(CheckpointTensor{name, true, {}, it->second});
        else
            ckpt.tensors.push_back(CheckpointTensor{name, false, p.value, {}});
    }
    for (const auto& [name, fold] : m.folds) {
        ckpt.tensors.push_back(CheckpointTensor{"aux." + name + ".delta", false, fold.delta, {}});
        ckpt.tensors.push_back(CheckpointTensor{"aux." + name + ".s", false, fold.s, {}});
        ckpt.tensors.push_back(
            CheckpointTensor{"aux." + name + ".db", false, fold.extra_bias, {}});
    }
    return ckpt;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.vocab = j.at("vocab").get<Index>();
    cfg.d_model = j.at("d_model").get<Index>();
    cfg.d_ff = j.at("d_ff").get<Index>();
    cfg.n_layers = j.at("n_layers").get<Index>();
    std::string scope = j.at("quant_scope").get<std::string>();
    if (scope == "ffn_only")
        cfg.quant_scope = QuantScope::ffn_only;
    else if (scope == "ffn_and_attention")
        cfg.quant_scope = QuantScope::ffn_and_attention;
    else
        throw ConfigError("unknown quant_scope: " + scope);
    cfg.seed = j.at("seed").get<uint64_t>();
    return cfg;
}

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
    return nlohmann::json{
        {"vocab", cfg.vocab},
        {"d_model", cfg.d_model},
        {"d_ff", cfg.d_ff},
        {"n_layers", cfg.n_layers},
        {"quant_scope",
         cfg.quant_scope == QuantScope::ffn_only ? "ffn_only" : "ffn_and_attention"},
        {"seed", cfg.seed}};
}

LoadedModel instantiate(const Checkpoint& ckpt) {
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(ckpt.meta_json);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad checkpoint metadata: ") + e.what());
    }

    LoadedModel lm{ToyModel(model_config_from_json(meta.at("model")))};
    lm.kind = meta.at("kind").get<std::string>();
    lm.c = ckpt.c;
    lm.slice_state = ckpt.slice_state;
    if (meta.contains("eval")) {
        lm.batch_size = meta["eval"].value("batch_size", lm.batch_size);
        lm.seq_len = meta["eval"].value("seq_len", lm.seq_len);
        lm.eval_batches = meta["eval"].value("eval_batches", lm.eval_batches);
    }

    std::map<std::string, std::map<std::string, Tensor>> fold_parts;
    for (const CheckpointTensor& t : ckpt.tensors) {
        if (t.name.rfind("aux.", 0) == 0) {
            size_t dot = t.name.rfind('.');
            std::string proj = t.name.substr(4, dot - 4);
            fold_parts[proj][t.name.substr(dot + 1)] = t.raw;
            continue;
        }
        if (t.quantized) {
            lm.qweights.emplace(t.name, t.q);
            lm.model.param(t.name).value = dequantize(t.q);
        } else {
            Param& p = lm.model.param(t.name);
            if (!p.value.same_shape(t.raw))
                throw FormatError("checkpoint tensor shape mismatch: " + t.name);
            p.value = t.raw;
        }
    }
    for (auto& [proj, parts] : fold_parts) {
        if (!parts.count("delta") || !parts.count("s") || !parts.count("db"))
            throw FormatError("incomplete projection aux for " + proj);
        lm.folds.emplace(proj, FoldedProjAux{parts.at("delta"), parts.at("s"), parts.at("db")});
    }
    return lm;
}

}  // namespace matquant
