#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "plm2/model.hpp"
#include "support/oracles.hpp"

using namespace plm2;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.vocab_size = 17;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.max_seq_len = 64;
    c.init_std = 0.08f;
    return c;
}

std::vector<InputSlot> token_slots(const std::vector<int32_t>& ids) {
    std::vector<InputSlot> s;
    for (int32_t t : ids) s.push_back(InputSlot::of_token(t));
    return s;
}

std::vector<int> iota_pos(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    return p;
}

}  // namespace

TEST_CASE("forward shape contract for a single token") {
    auto m = TransformerModel::init_params(tiny_config(), 3);
    auto slots = token_slots({5});
    auto pos = iota_pos(1);
    auto r = m.forward(slots, pos);
    REQUIRE(r.hidden.shape() == std::vector<int>{1, 16});
    REQUIRE(r.logits.shape() == std::vector<int>{1, 17});
}

TEST_CASE("cached prefix equals full recompute") {
    for (PosEncoding enc : {PosEncoding::learned_absolute, PosEncoding::rotary}) {
        auto cfg = tiny_config();
        cfg.pos_encoding = enc;
        auto m = TransformerModel::init_params(cfg, 11);
        Rng rng(4);
        std::vector<int32_t> ids;
        for (int i = 0; i < 12; ++i) ids.push_back(static_cast<int32_t>(rng.next_below(17)));
        auto slots = token_slots(ids);
        auto pos = iota_pos(12);

        auto full = m.forward(slots, pos);
        KVCache cache(m);
        auto first = m.forward(std::span(slots).first(7), std::span(pos).first(7), &cache);
        auto rest = m.forward(std::span(slots).subspan(7), std::span(pos).subspan(7), &cache);

        float max_diff = 0.f;
        for (int i = 0; i < 7; ++i)
            for (int j = 0; j < 16; ++j)
                max_diff = std::max(max_diff, std::abs(first.hidden.data()[i * 16 + j] -
                                                       full.hidden.data()[i * 16 + j]));
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 16; ++j)
                max_diff = std::max(max_diff, std::abs(rest.hidden.data()[i * 16 + j] -
                                                       full.hidden.data()[(7 + i) * 16 + j]));
        REQUIRE(max_diff < 1e-5f);
    }
}

TEST_CASE("permuting two slots changes outputs only at and after the first") {
    auto m = TransformerModel::init_params(tiny_config(), 21);
    std::vector<int32_t> ids{3, 7, 1, 9, 2, 12};
    auto pos = iota_pos(6);
    auto base = m.forward(token_slots(ids), pos);
    std::swap(ids[2], ids[4]);
    auto perm = m.forward(token_slots(ids), pos);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 16; ++j)
            REQUIRE(perm.hidden.data()[i * 16 + j] == base.hidden.data()[i * 16 + j]);
    bool changed = false;
    for (int j = 0; j < 16; ++j) changed |= perm.hidden.data()[2 * 16 + j] != base.hidden.data()[2 * 16 + j];
    REQUIRE(changed);
}

TEST_CASE("causality: zeroing a later slot leaves earlier outputs unchanged exactly") {
    auto m = TransformerModel::init_params(tiny_config(), 8);
    Rng rng(2);
    std::vector<float> vec(16);
    for (auto& v : vec) v = static_cast<float>(rng.next_normal());
    std::vector<InputSlot> slots = token_slots({1, 2, 3, 4});
    slots.push_back(InputSlot::of_vector(vec));
    auto pos = iota_pos(5);
    auto base = m.forward(slots, pos);

    std::vector<float> zeroed(16, 0.0f);
    slots[4] = InputSlot::of_vector(zeroed);
    auto alt = m.forward(slots, pos);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 16; ++j)
            REQUIRE(alt.hidden.data()[i * 16 + j] == base.hidden.data()[i * 16 + j]);
}

TEST_CASE("assign_position_ids follows the policy") {
    REQUIRE(assign_position_ids({3, 1}, PositionPolicy::reuse_token_position) ==
            std::vector<int>{0, 0, 1, 1, 2, 2});
    REQUIRE(assign_position_ids({3, 1}, PositionPolicy::sequential) ==
            std::vector<int>{0, 1, 2, 3, 4, 5});
    REQUIRE(assign_position_ids({2, 2}, PositionPolicy::reuse_token_position) ==
            std::vector<int>{0, 0, 0, 1, 1, 1});
}

TEST_CASE("thought slots receive exactly the owner token's positional vector") {
    auto m = TransformerModel::init_params(tiny_config(), 5);
    // Zero the token embedding row so the embedded slot is purely the
    // positional vector; the thought slot injects a zero vector.
    Tensor& emb = const_cast<Tensor&>(m.token_embedding());
    for (int j = 0; j < 16; ++j) emb.mutable_data()[3 * 16 + j] = 0.0f;
    std::vector<float> vec(16, 0.0f);
    std::vector<InputSlot> slots{InputSlot::of_token(3), InputSlot::of_vector(vec)};
    std::vector<int> pos{4, 4};  // reuse: thought inherits the token's id
    Tensor x = m.embed_slots(slots, pos);
    const float* penc = m.position_embedding().data() + 4 * 16;
    for (int j = 0; j < 16; ++j) {
        REQUIRE(x.data()[j] == penc[j]);
        REQUIRE(x.data()[16 + j] == penc[j]);
    }
}

TEST_CASE("init is deterministic per seed") {
    auto a = TransformerModel::init_params(tiny_config(), 123);
    auto b = TransformerModel::init_params(tiny_config(), 123);
    auto c = TransformerModel::init_params(tiny_config(), 124);
    REQUIRE(a.params().size() == b.params().size());
    bool any_diff_seed_differs = false;
    for (size_t i = 0; i < a.params().size(); ++i) {
        const auto& ta = a.params()[i].tensor;
        const auto& tb = b.params()[i].tensor;
        REQUIRE(std::memcmp(ta.data(), tb.data(), ta.numel() * sizeof(float)) == 0);
        any_diff_seed_differs |=
            std::memcmp(ta.data(), c.params()[i].tensor.data(), ta.numel() * sizeof(float)) != 0;
    }
    REQUIRE(any_diff_seed_differs);
}

TEST_CASE("init_std zero gives all-zero weight matrices") {
    auto cfg = tiny_config();
    cfg.init_std = 0.0f;
    auto m = TransformerModel::init_params(cfg, 9);
    for (const auto& p : m.params()) {
        if (p.tensor.ndim() != 2) continue;
        for (float v : p.tensor.values()) REQUIRE(v == 0.0f);
    }
}

TEST_CASE("empirical std of a million-element weight is within 2 percent") {
    ModelConfig cfg;
    cfg.vocab_size = 1000;
    cfg.d_model = 1000;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.max_seq_len = 8;
    cfg.init_std = 0.02f;
    auto m = TransformerModel::init_params(cfg, 77);
    const auto& t = m.token_embedding();
    REQUIRE(t.numel() == 1000u * 1000u);
    double s = 0.0, s2 = 0.0;
    for (float v : t.values()) {
        s += v;
        s2 += static_cast<double>(v) * v;
    }
    const double n = static_cast<double>(t.numel());
    const double stddev = std::sqrt(s2 / n - (s / n) * (s / n));
    REQUIRE(stddev == Catch::Approx(0.02).epsilon(0.02));
}

TEST_CASE("errors: bad vector width, out-of-range position, over-capacity input") {
    auto m = TransformerModel::init_params(tiny_config(), 5);
    std::vector<float> narrow(8, 0.0f);
    std::vector<InputSlot> slots{InputSlot::of_vector(narrow)};
    std::vector<int> pos{0};
    REQUIRE_THROWS_AS(m.forward(slots, pos), ShapeError);

    auto good = token_slots({1});
    std::vector<int> big_pos{64};
    REQUIRE_THROWS_AS(m.forward(good, big_pos), ValueError);

    std::vector<int32_t> many(70, 1);
    auto many_slots = token_slots(many);
    std::vector<int> many_pos(70);
    for (int i = 0; i < 70; ++i) many_pos[i] = i % 60;
    REQUIRE_THROWS_AS(m.forward(many_slots, many_pos), CapacityError);
}

TEST_CASE("analytic parameter count matches the registry") {
    for (bool pause : {false, true}) {
        auto cfg = tiny_config();
        auto m = TransformerModel::make(cfg, pause);
        uint64_t total = 0;
        for (const auto& p : m.params()) total += p.tensor.numel();
        REQUIRE(total == TransformerModel::param_count(cfg, pause));
    }
    // Hand computation for the tiny config (learned positions, no pause).
    const uint64_t hand = 17 * 16 + 64 * 16 + 2 * (32 + 4 * 272 + 32 + 1088 + 1040) + 32 + 16 * 17;
    REQUIRE(TransformerModel::param_count(tiny_config()) == hand);
}
