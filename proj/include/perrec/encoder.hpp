#pragma once

#include <utility>
#include <vector>

#include "perrec/dataset.hpp"
#include "perrec/ops.hpp"
#include "perrec/tensor.hpp"

namespace perrec {

struct PeftAttachment;  // peft.hpp

// Frozen dual-tower encoder standing in for a pretrained multimodal model:
// a text tower over token ids and a vision tower over precomputed patch
// features, each a pre-LN transformer stack with an output head to d_prime.
struct EncoderConfig {
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int vocab_size = 1000;
    int max_text_len = 16;
    int n_patches = 16;
    int patch_dim = 64;
    int d_prime = 64;
    uint64_t seed = 0;

    int ffn_dim() const { return 4 * d_model; }
    int eos_token() const { return vocab_size - 1; }
    static constexpr int pad_token = 0;

    void validate() const;
};

struct EncoderLayer {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor w_ff1, b_ff1, w_ff2, b_ff2;
};

struct EncoderTower {
    Tensor embed;       // text: token table [vocab×d]; vision: patch projection [patch_dim×d]
    Tensor embed_bias;  // vision projection bias (undefined for text)
    Tensor pos;
    std::vector<EncoderLayer> layers;
    Tensor lnf_g, lnf_b;
    Tensor head_w, head_b;  // d_model -> d_prime
};

struct EncoderModel {
    EncoderConfig cfg;
    EncoderTower text, vision;

    std::vector<std::pair<std::string, Tensor>> parameters() const;
    int64_t parameter_count() const;
    uint64_t checksum() const;
};

// Deterministic in the config (including seed); every parameter frozen.
EncoderModel build_encoder(const EncoderConfig& cfg);

// Per-tower intermediates from one encode: pooled hidden state after each
// layer (consumed by side-network adapters) and the last layer's attention
// weights. eos_pos / n_title locate the text pooling position and the real
// title tokens.
struct EncoderTrace {
    std::vector<Tensor> text_pooled, vision_pooled;  // n_layers each, [d_model]
    Tensor text_attention, vision_attention;         // [h×T×T]
    int eos_pos = -1;
    int n_title = 0;
};

struct EncodeResult {
    Tensor x;  // vision embedding [d_prime]
    Tensor y;  // text embedding [d_prime]
    EncoderTrace trace;
};

// Runs both towers with an optional PEFT attachment. Text pooling reads the
// appended EOS position; vision pooling averages patches. Title tokens are
// the prefix before the first pad (id 0); ids at and beyond the first pad are
// never read. Out-of-vocabulary tokens raise DataError.
//
// With no attachment the result is the frozen model's output and nothing is
// recorded on the tape. Trace pooled states are populated when running
// without a tape or with a side-network attachment.
EncodeResult encode(Tape* tape, const EncoderModel& model, const PeftAttachment* peft,
                    const ItemRecord& item);

// Head-averaged last-layer attention from the EOS query to the title tokens,
// renormalized to sum 1.
std::vector<double> eos_attention(const EncoderTrace& trace);

}  // namespace perrec
