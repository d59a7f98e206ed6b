#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "matquant/model.hpp"
#include "matquant/quant.hpp"

namespace matquant {

// One named entry of a checkpoint: either a raw float64 tensor or packed
// integer codes with their scales.
struct CheckpointTensor {
    std::string name;
    bool quantized = false;
    Tensor raw;        // when !quantized
    QuantizedTensor q;  // when quantized
};

// In-memory image of a .matq file. All quantized tensors share the bit-width
// c and the (optional) slice state.
struct Checkpoint {
    int c = 0;  // 0 = float-only checkpoint
    SliceState slice_state;
    std::string meta_json;
    std::vector<CheckpointTensor> tensors;
};

// Binary layout (little-endian): magic "MATQ", u16 version, u8 c, u8 slice_r,
// u8 slice_mode, u8 reserved, u32 meta length + bytes, u32 tensor count, then
// per tensor: u16 name length + bytes, u8 kind, u8 ndims, u8 axis, u8
// reserved, u32 dims..., and the payload. Raw payloads are f64; quantized
// payloads are u32 channel count, f32 scales, f32 zero points, then codes
// bit-packed MSB-first (c bits per code) followed, in extra-sliced files, by
// the overflow sidecar. Readers consume declared lengths only, so trailing
// bytes are ignored.
//
// Codes are stored MSB-first so the first r bits of a field equal
// floor(code / 2^(c-r)); slicing at load still goes through the full codes
// because the round-up rule needs the (r+1)-th bit. Overflow codes (2^c,
// extra mode) do not fit c bits: the payload stores the top plain bucket and
// the sidecar restores them.
std::vector<uint8_t> pack(const Checkpoint& ckpt);
Checkpoint unpack(const std::vector<uint8_t>& bytes);

// Unpack then slice every quantized tensor to r bits. The file must hold
// unsliced c-bit codes.
Checkpoint load_sliced(const std::vector<uint8_t>& bytes, int r, SliceMode mode);

// Atomic file I/O (temp + rename).
void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);
Checkpoint load_sliced_file(const std::string& path, int r, SliceMode mode);

// Overflow sidecar: u32 count then sorted u32 flat indices of codes == 2^c.
std::vector<uint8_t> write_overflow_sidecar(const QuantizedTensor& q);
std::vector<uint32_t> read_overflow_sidecar(const uint8_t* data, size_t size, size_t& consumed);

// Low-level bit packing helpers (MSB-first fields of width c).
std::vector<uint8_t> pack_codes(const std::vector<uint16_t>& codes, int c);
std::vector<uint16_t> unpack_codes(const std::vector<uint8_t>& bytes, size_t n_codes, int c);

// ---- model adapters ----

std::string make_meta(const ToyModel& model, const std::string& kind, int c, Index batch_size,
                      Index seq_len, int eval_batches);

Checkpoint make_float_checkpoint(const ToyModel& model, std::string meta);
Checkpoint make_qat_checkpoint(const ToyModel& model, int c, std::string meta);
Checkpoint make_omniquant_checkpoint(const ToyModel& model, const OmniAux& aux, int c,
                                     std::string meta);

// A checkpoint rebuilt for evaluation: float skeleton, stored codes, folded
// projection aux, parsed metadata.
struct LoadedModel {
    ToyModel model;
    std::map<std::string, QuantizedTensor> qweights;
    std::map<std::string, FoldedProjAux> folds;
    std::string kind;
    int c = 0;
    SliceState slice_state;
    Index batch_size = 8;
    Index seq_len = 32;
    int eval_batches = 4;
};

LoadedModel instantiate(const Checkpoint& ckpt);

ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json model_config_to_json(const ModelConfig& cfg);

}  // namespace matquant
