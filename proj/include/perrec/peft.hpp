#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "perrec/encoder.hpp"
#include "perrec/tensor.hpp"

namespace perrec {

enum class PeftKind { Lora, Ia3, SideNet };

const char* peft_kind_name(PeftKind k);
PeftKind peft_kind_from(const std::string& name);  // ConfigError on unknown

// Low-rank adapter pair for one frozen matrix W[d×d']: W is used as W + AB.
// B starts at zero so the initial delta is exactly zero.
struct LoraSite {
    Tensor a;  // [d×k]
    Tensor b;  // [k×d']
};

struct LoraTower {
    std::vector<LoraSite> q, v;  // per layer; query and value projections
};

// Dimension-wise gate vectors, initialized to ones (identity rescale).
struct Ia3Tower {
    std::vector<Tensor> k, v, ff;  // per layer; key/value projections, first FFN linear
};

// External side network: per layer a down-projection of the frozen pooled
// intermediate plus a learnable gated fusion scalar; a zero-initialized
// up-projection adds the side state to the tower output. Gradients never
// enter the frozen towers because the base pass runs off-tape.
struct SideTower {
    std::vector<Tensor> down_w, down_b;  // [d_model×hidden], [hidden]
    std::vector<Tensor> gate;            // scalars
    Tensor up_w, up_b;                   // [hidden×d_prime], [d_prime]
};

// Frozen per-item intermediates are training-invariant, so side-network
// training caches them keyed by item id (shared across clones of the same
// frozen model).
struct SideCacheEntry {
    std::vector<std::vector<double>> text_pooled, vision_pooled;
    std::vector<double> x, y;
};
using SideCache = std::unordered_map<int64_t, SideCacheEntry>;

struct PeftAttachment {
    PeftKind kind = PeftKind::Lora;
    int rank = 4;         // LoRA
    int side_hidden = 32;  // side network
    LoraTower lora_text, lora_vision;
    Ia3Tower ia3_text, ia3_vision;
    SideTower side_text, side_vision;
    bool cache_enabled = true;
    std::shared_ptr<SideCache> cache;

    // Checkpoint names: <prefix>/<tower>/<site>/<tensor>.
    std::vector<std::pair<std::string, Tensor>> parameters(const std::string& prefix) const;
    int64_t parameter_count() const;
    uint64_t checksum() const;
};

struct AttachOptions {
    int rank = 4;
    int side_hidden = 32;
};

// Neutral initialization: encoding with a fresh attachment equals encoding
// with the frozen model alone (LoRA B = 0, (IA)³ gates = 1, side up = 0).
PeftAttachment attach(const EncoderModel& model, PeftKind kind, uint64_t seed,
                      const AttachOptions& opts = {});

// Deep copy with disjoint trainable storage; the side cache stays shared
// (it holds frozen-model values only).
PeftAttachment clone_attachment(const PeftAttachment& src);

// Parameter accounting in the shape of the published table: the global
// total is one PEFT module + one projector + the shared backbone pieces;
// the grouped total adds (C-1) extra module+projector pairs.
struct ParameterReport {
    int64_t peft = 0;
    int64_t projector = 0;
    int64_t sasrec = 0;
    int64_t transductive = 0;
    int groups = 1;
    int64_t foundation = 0;

    int64_t global_total() const { return peft + projector + sasrec + transductive; }
    int64_t grouped_total() const {
        return global_total() + static_cast<int64_t>(groups - 1) * (peft + projector);
    }
    double overhead_ratio() const {
        return foundation > 0 ? static_cast<double>(grouped_total()) / static_cast<double>(foundation)
                              : 0.0;
    }
};

ParameterReport count_parameters(int64_t peft, int64_t projector, int64_t sasrec,
                                 int64_t transductive, int groups, int64_t foundation);

}  // namespace perrec
