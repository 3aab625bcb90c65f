#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "perrec/checkpoint.hpp"
#include "perrec/dataset.hpp"
#include "perrec/encoder.hpp"
#include "perrec/grouping.hpp"
#include "perrec/optimizer.hpp"
#include "perrec/peft.hpp"
#include "perrec/recsys.hpp"

namespace perrec {

enum class Method {
    WoMultimodal,       // transductive embeddings only
    FrozenMultimodal,   // encoder used, no adaptation
    GlobalPeft,         // one shared PEFT module
    UserSeq,            // learnable user embedding appended to the sequence
    UserConcat,         // learnable user embedding concatenated per item
    GroupSeq,           // group embedding appended to the sequence
    GroupConcat,        // group embedding concatenated per item
    Personalized,       // per-group PEFT + projector, group-pool negatives
    NoText,             // personalized, text branch zeroed
    NoVision,           // personalized, vision branch zeroed
    FullPoolNegatives,  // personalized, negatives from the full item set
    LargeGlobal,        // one module scaled to the personalized budget
    RandomGroups        // personalized over a uniform random partition
};

const char* method_name(Method m);
Method method_from(const std::string& name);

// True for methods carrying C group-specific modules.
bool method_grouped(Method m);
// True for methods initialized from a Global-PEFT checkpoint.
bool method_needs_global_init(Method m);
// True for methods that need a group assignment input.
bool method_needs_assignment(Method m);

struct RunConfig {
    Method method = Method::GlobalPeft;
    PeftKind peft = PeftKind::Lora;
    int groups = 8;
    int epochs = 0;  // 0 -> 20 for personalized-family, 30 otherwise
    double lr = 1e-4;
    double weight_decay = 1e-4;
    LossMode loss_mode = LossMode::StandardBce;
    uint64_t seed = 0;
    int batch_size = 16;
    int lora_rank = 4;
    int side_hidden = 32;
    int d = 32;  // transductive / SASRec dimension
    int sasrec_blocks = 2;
    int sasrec_heads = 4;
    int max_seq_len = 10;
    double dropout = 0.3;
    int projector_hidden = 64;
    EncoderConfig encoder;  // vocab_size/n_patches/patch_dim 0 -> derived from data
    bool exclude_seen = true;
    std::vector<int> eval_ks = {20, 30};
    int eval_threads = 1;
    // > 0: additionally keep the best checkpoint among the first N epochs
    // (the Global-PEFT stage feeding grouping and personalized init).
    int snapshot_epochs = 0;
    std::string data_dir, out_path, assign_path, init_ckpt;

    int effective_epochs() const;
    void validate() const;
    std::string to_json_string() const;
    static RunConfig from_json_string(const std::string& s);
};

// All learnable state of one run plus the frozen encoder.
struct ModelBundle {
    RunConfig cfg;
    EncoderModel encoder;
    GroupAssignment assign;                  // trivial for ungrouped methods
    std::vector<PeftAttachment> peft;        // C for grouped methods, 1 or 0 otherwise
    std::vector<Projector> projector;        // matches peft sizing (1 for FrozenMM)
    Tensor transductive;                     // [n_items × d]
    Sasrec sasrec;
    Tensor user_emb;   // [n_users × d] for user-level methods
    Tensor group_emb;  // [C × d] for group-level methods
    Tensor concat_w, concat_b;  // [2d × d], [d] for the concat variants

    int module_count() const { return static_cast<int>(projector.size()); }

    std::vector<std::pair<std::string, Tensor>> trainable_named() const;
    std::vector<std::pair<std::string, Tensor>> shared_named() const;        // non-group components
    std::vector<std::pair<std::string, Tensor>> group_named(int c) const;    // peft + projector of c
    Checkpoint capture() const;                    // trainables only; meta left empty
    void restore(const Checkpoint& ck);            // shapes must match
};

// Builds the bundle for a config: fresh seeded components, or (for the
// personalized family) group modules cloned from the Global-PEFT checkpoint.
ModelBundle build_bundle(const RunConfig& cfg, const Dataset& data);

// Reconstructs a bundle from a checkpoint's config echo and tensor store.
ModelBundle bundle_from_checkpoint(const Checkpoint& ck, const Dataset& data);

struct EpochStats {
    double train_loss = 0.0;
    double val_hit30 = 0.0;
};

struct TrainAudit {
    int64_t negative_draws = 0;
    int64_t negatives_in_pool = 0;
    int64_t mixed_group_batches = 0;
    int first_batch_group = -1;
    std::set<std::string> first_batch_grad_names;    // trainables with grads after batch 1
    std::set<int64_t> first_batch_transductive_rows;  // rows with nonzero gradient
    std::set<int64_t> first_batch_item_rows;          // rows of items appearing in batch 1
    std::set<std::string> changed_names;              // checksum changed over the run
    std::set<std::string> trainable_names;
    uint64_t encoder_checksum_before = 0, encoder_checksum_after = 0;
};

struct TrainResult {
    Checkpoint best;  // meta carries config echo, epoch, val_hit30
    int best_epoch = -1;
    double best_val_hit30 = 0.0;
    std::optional<Checkpoint> snapshot;  // best within the first snapshot_epochs
    std::vector<EpochStats> history;
    TrainAudit audit;
    ModelBundle bundle;  // restored to the best checkpoint
};

// Full training run: AdamW over the method's trainable set, per-epoch
// validation Hit@30, best checkpoint kept. Throws NumericError on a
// non-finite loss.
TrainResult train(const RunConfig& cfg, const Dataset& data);

// Leave-one-out evaluation. test split: feed training sequence + validation
// item, rank the test item; validation split: feed the training sequence,
// rank the validation item.
Metrics evaluate(const ModelBundle& bundle, const Dataset& data, const std::vector<int>& ks,
                 bool test_split);

// Last-position SASRec output over each user's training sequence under the
// given bundle (evaluation mode), sorted by user id.
std::vector<std::pair<int64_t, std::vector<double>>> interest_vectors(const ModelBundle& bundle,
                                                                      const Dataset& data);

// Rows fed to SASRec at evaluation time for a user with `window` input items.
int eval_input_rows(Method m, int window, int max_len);

// LargeGlobal sizing: (rank or side hidden, projector hidden) minimizing the
// distance to the personalized parameter budget.
struct LargeGlobalSizing {
    int knob = 0;  // lora rank or side hidden (unused for ia3)
    int projector_hidden = 0;
    int64_t params = 0;
    int64_t target = 0;
    int64_t delta = 0;
};
LargeGlobalSizing size_large_global(const RunConfig& cfg, const Dataset& data);

}  // namespace perrec
