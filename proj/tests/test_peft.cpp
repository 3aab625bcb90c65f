#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <set>

#include "perrec/encoder.hpp"
#include "perrec/ops.hpp"
#include "perrec/peft.hpp"

using namespace perrec;

namespace {

EncoderConfig small_cfg() {
    EncoderConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.vocab_size = 40;
    cfg.max_text_len = 8;
    cfg.n_patches = 3;
    cfg.patch_dim = 5;
    cfg.d_prime = 12;
    cfg.seed = 3;
    return cfg;
}

ItemRecord make_item(const EncoderConfig& cfg, int64_t id, std::vector<int> tokens, uint64_t seed) {
    ItemRecord it;
    it.item_id = id;
    it.text_tokens = std::move(tokens);
    Rng rng(seed);
    it.patches.resize(static_cast<size_t>(cfg.n_patches));
    for (auto& p : it.patches) {
        p.resize(static_cast<size_t>(cfg.patch_dim));
        for (auto& v : p) v = rng.normal();
    }
    return it;
}

void randomize(const Tensor& t, Rng& rng, double sd = 0.3) {
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal() * sd;
}

}  // namespace

TEST_CASE("lora parameter count per target is k(d+d')") {
    EncoderConfig cfg = small_cfg();
    EncoderModel m = build_encoder(cfg);
    const int rank = 4;
    PeftAttachment a = attach(m, PeftKind::Lora, 1, {rank, 32});
    // q and v per layer per tower; targets are square d_model matrices.
    const int64_t per_target = static_cast<int64_t>(rank) * (cfg.d_model + cfg.d_model);
    const int64_t targets = 2LL * cfg.n_layers * 2;
    CHECK(a.parameter_count() == per_target * targets);
}

TEST_CASE("unknown peft kind name is rejected") {
    CHECK_THROWS_AS(peft_kind_from("adapterx"), ConfigError);
    CHECK(peft_kind_from("ia3") == PeftKind::Ia3);
}

TEST_CASE("lora equals materialized W+AB within 1e-9") {
    EncoderConfig cfg = small_cfg();
    EncoderModel m = build_encoder(cfg);
    PeftAttachment a = attach(m, PeftKind::Lora, 5);
    Rng rng(77);
    for (auto& [name, t] : a.parameters("peft")) randomize(t, rng);

    // Materialization oracle: bake AB into a copy of the frozen weights.
    EncoderModel baked = build_encoder(cfg);
    auto bake = [&](EncoderTower& tw, const LoraTower& lt) {
        for (size_t li = 0; li < tw.layers.size(); ++li) {
            Tensor dq = matmul(nullptr, lt.q[li].a, lt.q[li].b);
            Tensor dv = matmul(nullptr, lt.v[li].a, lt.v[li].b);
            for (int64_t i = 0; i < dq.numel(); ++i) tw.layers[li].wq.data()[i] += dq.data()[i];
            for (int64_t i = 0; i < dv.numel(); ++i) tw.layers[li].wv.data()[i] += dv.data()[i];
        }
    };
    bake(baked.text, a.lora_text);
    bake(baked.vision, a.lora_vision);

    ItemRecord item = make_item(cfg, 9, {4, 5, 6, 7}, 31);
    EncodeResult with_adapter = encode(nullptr, m, &a, item);
    EncodeResult materialized = encode(nullptr, baked, nullptr, item);
    for (int64_t i = 0; i < with_adapter.x.numel(); ++i) {
        CHECK(std::abs(with_adapter.x.data()[i] - materialized.x.data()[i]) <= 1e-9);
        CHECK(std::abs(with_adapter.y.data()[i] - materialized.y.data()[i]) <= 1e-9);
    }
}

TEST_CASE("clone_attachment isolates storage") {
    EncoderConfig cfg = small_cfg();
    EncoderModel m = build_encoder(cfg);
    ItemRecord item = make_item(cfg, 2, {11, 12}, 13);

    for (PeftKind kind : {PeftKind::Lora, PeftKind::Ia3, PeftKind::SideNet}) {
        CAPTURE(peft_kind_name(kind));
        PeftAttachment src = attach(m, kind, 21);
        Rng rng(5);
        for (auto& [name, t] : src.parameters("peft")) randomize(t, rng);
        const uint64_t src_sum = src.checksum();

        PeftAttachment cl = clone_attachment(src);
        EncodeResult a = encode(nullptr, m, &src, item);
        EncodeResult b = encode(nullptr, m, &cl, item);
        CHECK(std::memcmp(a.x.data(), b.x.data(), sizeof(double) * a.x.numel()) == 0);
        CHECK(std::memcmp(a.y.data(), b.y.data(), sizeof(double) * a.y.numel()) == 0);

        // Mutating the clone (a stand-in for a training step) leaves src intact.
        for (auto& [name, t] : cl.parameters("peft"))
            for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] += 0.25;
        CHECK(src.checksum() == src_sum);
        CHECK(cl.checksum() != src_sum);
    }
}

TEST_CASE("C clones give C disjoint trainable sets totalling C x src params") {
    EncoderConfig cfg = small_cfg();
    EncoderModel m = build_encoder(cfg);
    PeftAttachment src = attach(m, PeftKind::Ia3, 2);
    const int C = 4;
    std::vector<PeftAttachment> group;
    for (int c = 0; c < C; ++c) group.push_back(clone_attachment(src));

    int64_t total = 0;
    std::set<TensorImpl*> storages;
    for (const auto& g : group)
        for (const auto& [name, t] : g.parameters("peft")) {
            total += t.numel();
            storages.insert(t.impl());
        }
    CHECK(total == C * src.parameter_count());
    CHECK(storages.size() == static_cast<size_t>(C) * src.parameters("peft").size());
}

TEST_CASE("ia3 adds elementwise sites only, no extra matmuls") {
    EncoderConfig cfg = small_cfg();
    EncoderModel m = build_encoder(cfg);
    ItemRecord item = make_item(cfg, 3, {7, 8, 9}, 17);

    Tape frozen_tape;
    frozen_tape.record_all = true;
    encode(&frozen_tape, m, nullptr, item);

    PeftAttachment ia3 = attach(m, PeftKind::Ia3, 4);
    Tape ia3_tape;
    ia3_tape.record_all = true;
    encode(&ia3_tape, m, &ia3, item);

    CHECK(ia3_tape.count("matmul") == frozen_tape.count("matmul"));
    CHECK(ia3_tape.count("mul") > frozen_tape.count("mul"));

    PeftAttachment lora = attach(m, PeftKind::Lora, 4);
    Tape lora_tape;
    lora_tape.record_all = true;
    encode(&lora_tape, m, &lora, item);
    CHECK(lora_tape.count("matmul") > frozen_tape.count("matmul"));
}

TEST_CASE("sidenet: gradients reach side parameters only; cache is exact") {
    EncoderConfig cfg = small_cfg();
    EncoderModel m = build_encoder(cfg);
    PeftAttachment side = attach(m, PeftKind::SideNet, 6);
    Rng rng(99);
    // Non-neutral up-projection so the side path carries signal.
    randomize(side.side_text.up_w, rng, 0.1);
    randomize(side.side_vision.up_w, rng, 0.1);
    ItemRecord item = make_item(cfg, 4, {5, 6}, 19);

    Tape tape;
    EncodeResult r = encode(&tape, m, &side, item);
    Tensor loss = add(&tape, sum_all(&tape, r.x), sum_all(&tape, r.y));
    backward(tape, loss);

    for (const auto& [name, t] : m.parameters()) {
        CAPTURE(name);
        CHECK_FALSE(t.has_grad());
    }
    for (const auto& [name, t] : side.parameters("peft")) {
        CAPTURE(name);
        CHECK(t.has_grad());
    }

    // Cached intermediates must equal freshly computed ones bit-exactly.
    PeftAttachment cached = clone_attachment(side);
    cached.cache_enabled = true;
    cached.cache = std::make_shared<SideCache>();
    EncodeResult first = encode(nullptr, m, &cached, item);   // fills cache
    EncodeResult second = encode(nullptr, m, &cached, item);  // cache hit
    PeftAttachment uncached = clone_attachment(side);
    uncached.cache_enabled = false;
    EncodeResult fresh = encode(nullptr, m, &uncached, item);
    CHECK(std::memcmp(first.x.data(), second.x.data(), sizeof(double) * first.x.numel()) == 0);
    CHECK(std::memcmp(first.x.data(), fresh.x.data(), sizeof(double) * first.x.numel()) == 0);
    CHECK(std::memcmp(first.y.data(), fresh.y.data(), sizeof(double) * first.y.numel()) == 0);
    REQUIRE(cached.cache->count(item.item_id) == 1);
    const SideCacheEntry& entry = cached.cache->at(item.item_id);
    EncodeResult probe = encode(nullptr, m, &uncached, item);
    for (size_t l = 0; l < entry.text_pooled.size(); ++l)
        CHECK(std::memcmp(entry.text_pooled[l].data(), probe.trace.text_pooled[l].data(),
                          entry.text_pooled[l].size() * sizeof(double)) == 0);
}

TEST_CASE("parameter accounting reproduces the published table") {
    // Sports column: 46,080 + 67,872 + 12,992 + 502,816.
    ParameterReport sports = count_parameters(46080, 67872, 12992, 502816, 8, 151323393);
    CHECK(sports.global_total() == 629760);
    CHECK(sports.grouped_total() == 1427424);

    ParameterReport toys = count_parameters(46080, 67872, 12992, 471360, 8, 151323393);
    CHECK(toys.global_total() == 598304);
    CHECK(toys.grouped_total() == 1395968);

    ParameterReport beauty = count_parameters(46080, 67872, 12992, 997216, 8, 151323393);
    CHECK(beauty.global_total() == 1124160);
    CHECK(beauty.grouped_total() == 1921824);
    CHECK(std::abs(beauty.overhead_ratio() - 0.013) <= 1e-3);

    ParameterReport arts = count_parameters(46080, 67872, 12992, 604672, 8, 151323393);
    CHECK(arts.global_total() == 731616);
    CHECK(arts.grouped_total() == 1529280);

    // Degenerate grouping: one group collapses to the global total.
    ParameterReport single = count_parameters(46080, 67872, 12992, 502816, 1, 151323393);
    CHECK(single.grouped_total() == single.global_total());
}
