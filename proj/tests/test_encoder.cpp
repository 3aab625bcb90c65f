#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "perrec/encoder.hpp"
#include "perrec/peft.hpp"

using namespace perrec;

namespace {

EncoderConfig small_cfg() {
    EncoderConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.vocab_size = 50;
    cfg.max_text_len = 8;
    cfg.n_patches = 3;
    cfg.patch_dim = 5;
    cfg.d_prime = 12;
    cfg.seed = 7;
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

// Independent shape walk over the declared architecture.
int64_t expected_param_count(const EncoderConfig& c) {
    const int64_t d = c.d_model, f = 4LL * c.d_model;
    const int64_t per_layer = 4 * (d * d + d)      // q,k,v,o with biases
                              + 4 * d              // two layer norms
                              + (d * f + f)        // ffn in
                              + (f * d + d);       // ffn out
    const int64_t tower_tail = 2 * d + d * c.d_prime + c.d_prime;  // final ln + head
    const int64_t text = static_cast<int64_t>(c.vocab_size) * d + c.max_text_len * d +
                         c.n_layers * per_layer + tower_tail;
    const int64_t vision = static_cast<int64_t>(c.patch_dim) * d + d + c.n_patches * d +
                           c.n_layers * per_layer + tower_tail;
    return text + vision;
}

}  // namespace

TEST_CASE("build_encoder is deterministic in the seed") {
    EncoderConfig cfg = small_cfg();
    EncoderModel a = build_encoder(cfg);
    EncoderModel b = build_encoder(cfg);
    CHECK(a.checksum() == b.checksum());

    cfg.seed = 8;
    EncoderModel c = build_encoder(cfg);
    CHECK(a.checksum() != c.checksum());

    for (const auto& [name, t] : a.parameters()) {
        CAPTURE(name);
        CHECK_FALSE(t.requires_grad());
    }
}

TEST_CASE("parameter count matches the closed-form shape walk") {
    EncoderConfig cfg = small_cfg();
    EncoderModel m = build_encoder(cfg);
    CHECK(m.parameter_count() == expected_param_count(cfg));
}

TEST_CASE("invalid configs are rejected") {
    EncoderConfig cfg = small_cfg();
    cfg.d_model = 15;  // not divisible by heads
    CHECK_THROWS_AS(build_encoder(cfg), ConfigError);
    cfg = small_cfg();
    cfg.d_prime = 0;
    CHECK_THROWS_AS(build_encoder(cfg), ConfigError);
}

TEST_CASE("frozen encode is deterministic and validates input") {
    EncoderConfig cfg = small_cfg();
    EncoderModel m = build_encoder(cfg);
    ItemRecord item = make_item(cfg, 1, {3, 9, 4}, 11);

    EncodeResult r1 = encode(nullptr, m, nullptr, item);
    EncodeResult r2 = encode(nullptr, m, nullptr, item);
    CHECK(std::memcmp(r1.x.data(), r2.x.data(), sizeof(double) * r1.x.numel()) == 0);
    CHECK(std::memcmp(r1.y.data(), r2.y.data(), sizeof(double) * r1.y.numel()) == 0);
    CHECK(r1.x.numel() == cfg.d_prime);
    CHECK(r1.y.numel() == cfg.d_prime);
    CHECK(static_cast<int>(r1.trace.text_pooled.size()) == cfg.n_layers);
    CHECK(static_cast<int>(r1.trace.vision_pooled.size()) == cfg.n_layers);

    ItemRecord bad = item;
    bad.text_tokens = {3, cfg.vocab_size + 1};
    CHECK_THROWS_AS(encode(nullptr, m, nullptr, bad), DataError);
    ItemRecord bad2 = item;
    bad2.patches.pop_back();
    CHECK_THROWS_AS(encode(nullptr, m, nullptr, bad2), DataError);
}

TEST_CASE("padding invariance: ids beyond the title never matter") {
    EncoderConfig cfg = small_cfg();
    EncoderModel m = build_encoder(cfg);
    ItemRecord a = make_item(cfg, 1, {3, 9, 4, 0, 0, 0}, 11);
    ItemRecord b = make_item(cfg, 1, {3, 9, 4, 0, 17, 23}, 11);
    EncodeResult ra = encode(nullptr, m, nullptr, a);
    EncodeResult rb = encode(nullptr, m, nullptr, b);
    CHECK(std::memcmp(ra.x.data(), rb.x.data(), sizeof(double) * ra.x.numel()) == 0);
    CHECK(std::memcmp(ra.y.data(), rb.y.data(), sizeof(double) * ra.y.numel()) == 0);
}

TEST_CASE("text attention rows are stochastic (bidirectional tower)") {
    EncoderConfig cfg = small_cfg();
    EncoderModel m = build_encoder(cfg);
    ItemRecord item = make_item(cfg, 2, {5, 6, 7, 8}, 13);
    EncodeResult r = encode(nullptr, m, nullptr, item);
    const Tensor& w = r.trace.text_attention;
    REQUIRE(w.defined());
    const int64_t t_len = w.dim(1);
    CHECK(t_len == 5);  // 4 title tokens + EOS
    for (int64_t h = 0; h < w.dim(0); ++h)
        for (int64_t i = 0; i < t_len; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < t_len; ++j) s += w.data()[(h * t_len + i) * t_len + j];
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
}

TEST_CASE("eos_attention") {
    EncoderConfig cfg = small_cfg();
    EncoderModel m = build_encoder(cfg);

    ItemRecord single = make_item(cfg, 3, {21}, 17);
    auto dist = eos_attention(encode(nullptr, m, nullptr, single).trace);
    REQUIRE(dist.size() == 1);
    CHECK(dist[0] == doctest::Approx(1.0).epsilon(1e-15));

    ItemRecord multi = make_item(cfg, 4, {21, 22, 23, 24, 25}, 19);
    auto d1 = eos_attention(encode(nullptr, m, nullptr, multi).trace);
    auto d2 = eos_attention(encode(nullptr, m, nullptr, multi).trace);
    REQUIRE(d1.size() == 5);
    double s = 0.0;
    for (double v : d1) s += v;
    CHECK(std::abs(s - 1.0) <= 1e-12);
    CHECK(d1 == d2);
}

TEST_CASE("neutral attachments reproduce the frozen output") {
    EncoderConfig cfg = small_cfg();
    EncoderModel m = build_encoder(cfg);
    ItemRecord item = make_item(cfg, 5, {8, 9, 10}, 23);
    EncodeResult base = encode(nullptr, m, nullptr, item);

    for (PeftKind kind : {PeftKind::Lora, PeftKind::Ia3, PeftKind::SideNet}) {
        CAPTURE(peft_kind_name(kind));
        PeftAttachment a = attach(m, kind, 31);
        EncodeResult r = encode(nullptr, m, &a, item);
        for (int64_t i = 0; i < base.x.numel(); ++i) {
            CHECK(std::abs(r.x.data()[i] - base.x.data()[i]) <= 1e-12);
            CHECK(std::abs(r.y.data()[i] - base.y.data()[i]) <= 1e-12);
        }
    }
}
