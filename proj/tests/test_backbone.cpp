#include "selfctl/backbone.hpp"

#include "doctest.h"

#include <random>

using namespace selfctl;

namespace {

BackboneConfig small_config() {
    BackboneConfig cfg;
    cfg.width = 8;
    cfg.depth_enc = 2;
    cfg.depth_dec = 2;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.token_dim = 3;
    cfg.cond_token_dim = 2;
    cfg.text_vocab_size = 6;
    cfg.max_text_len = 3;
    cfg.max_cond_len = 3;
    cfg.max_gen_len = 4;
    return cfg;
}

SequenceBatch random_batch(const BackboneConfig& cfg, const AttentionPolicy& policy, std::size_t B, Rng& rng,
                           SegmentLayout layout = SegmentLayout(2, 3, 4)) {
    std::normal_distribution<double> n;
    std::uniform_int_distribution<int> id(0, cfg.text_vocab_size - 1);
    SequenceBatch b;
    b.batch_size = B;
    b.layout = layout;
    b.policy = policy;
    for (std::size_t i = 0; i < B * layout.text_len(); ++i) b.text_ids.push_back(id(rng));
    b.cond_tokens = Mat(static_cast<Eigen::Index>(B * layout.imgcond_len()), cfg.cond_token_dim);
    b.gen_tokens = Mat(static_cast<Eigen::Index>(B * layout.gen_len()), cfg.token_dim);
    for (Eigen::Index i = 0; i < b.cond_tokens.size(); ++i) b.cond_tokens.data()[i] = n(rng);
    for (Eigen::Index i = 0; i < b.gen_tokens.size(); ++i) b.gen_tokens.data()[i] = n(rng);
    // Ragged visibility: sample b sees b+1 generated tokens (mod G).
    for (std::size_t s = 0; s < B; ++s)
        for (std::size_t i = 0; i < layout.gen_len(); ++i) b.visible.push_back(i <= s % layout.gen_len() ? 1 : 0);
    b.null_text.assign(B, 0);
    b.null_cond.assign(B, 0);
    return b;
}

Mat forward_z(const Backbone& bb, const SequenceBatch& batch) {
    nn::Graph g(false);
    return g.value(bb.forward(g, batch).z);
}

} // namespace

TEST_CASE("forward shapes") {
    Rng rng(1);
    nn::ParameterStore store;
    const auto cfg = small_config();
    Backbone bb(store, cfg, rng);
    const auto batch = random_batch(cfg, kDefaultPolicy, 3, rng);
    nn::Graph g(false);
    const auto out = bb.forward(g, batch);
    CHECK(g.value(out.z).rows() == 12);
    CHECK(g.value(out.z).cols() == 8);
    CHECK(nn::all_finite(g.value(out.z)));
    // Encoder holds conditions plus the visible generated tokens of each sample.
    CHECK(g.value(out.encoder_out).rows() == 3 * 5 + (1 + 2 + 3));
    CHECK(out.encoder_positions[1].size() == 7);
    const Var states = bb.condition_states(g, batch, out);
    CHECK(g.value(states).rows() == 2 * 3 * 5);
}

TEST_CASE("default policy: condition states ignore generated tokens exactly") {
    Rng rng(2);
    nn::ParameterStore store;
    const auto cfg = small_config();
    Backbone bb(store, cfg, rng);
    auto batch = random_batch(cfg, kDefaultPolicy, 2, rng);
    batch.visible.assign(batch.visible.size(), 1);
    CHECK(max_condition_sensitivity(bb, batch, 0, rng) <= 1e-9);
    batch.policy = ablation_policy(8);
    CHECK(max_condition_sensitivity(bb, batch, 0, rng) > 1e-6);
    // Projections agree with the full Jacobian on zero versus non-zero.
    CHECK(max_condition_sensitivity(bb, batch, 4, rng) > 1e-6);
    batch.policy = ablation_policy(7);
    CHECK(max_condition_sensitivity(bb, batch, 4, rng) == 0.0);
}

TEST_CASE("causal cross policies never leak, bidirectional cross ones do") {
    Rng rng(3);
    nn::ParameterStore store;
    const auto cfg = small_config();
    Backbone bb(store, cfg, rng);
    auto batch = random_batch(cfg, kDefaultPolicy, 2, rng);
    batch.visible.assign(batch.visible.size(), 1);
    for (int o = 1; o <= 8; ++o) {
        batch.policy = ablation_policy(o);
        const double s = max_condition_sensitivity(bb, batch, 0, rng);
        if (batch.policy.cross == IntraMode::Causal) CHECK(s <= 1e-9);
        else CHECK(s > 1e-6);
    }
}

TEST_CASE("hidden generated values are never read") {
    Rng rng(4);
    nn::ParameterStore store;
    const auto cfg = small_config();
    Backbone bb(store, cfg, rng);
    auto batch = random_batch(cfg, ablation_policy(8), 2, rng);
    const Mat z0 = forward_z(bb, batch);
    for (std::size_t i = 0; i < batch.visible.size(); ++i)
        if (!batch.visible[i]) batch.gen_tokens.row(static_cast<Eigen::Index>(i)).setConstant(123.0);
    CHECK(forward_z(bb, batch) == z0);
    batch.gen_tokens(0, 0) += 1.0; // visible in every sample
    CHECK_FALSE(forward_z(bb, batch) == z0);
}

TEST_CASE("samples in a batch are independent") {
    Rng rng(5);
    nn::ParameterStore store;
    const auto cfg = small_config();
    Backbone bb(store, cfg, rng);
    auto batch = random_batch(cfg, ablation_policy(8), 3, rng);
    const Mat z0 = forward_z(bb, batch);
    batch.text_ids[2 * 2] = (batch.text_ids[2 * 2] + 1) % cfg.text_vocab_size;
    batch.cond_tokens.row(2 * 3).array() += 1.0;
    batch.gen_tokens.row(2 * 4).array() += 1.0;
    const Mat z1 = forward_z(bb, batch);
    CHECK(z1.topRows(8) == z0.topRows(8));
    CHECK_FALSE(z1.bottomRows(4) == z0.bottomRows(4));
}

TEST_CASE("null flags replace the condition content") {
    Rng rng(6);
    nn::ParameterStore store;
    const auto cfg = small_config();
    Backbone bb(store, cfg, rng);
    auto batch = random_batch(cfg, kDefaultPolicy, 1, rng);
    batch.null_text[0] = 1;
    batch.null_cond[0] = 1;
    const Mat z0 = forward_z(bb, batch);
    batch.text_ids[0] = (batch.text_ids[0] + 1) % cfg.text_vocab_size;
    batch.cond_tokens.array() += 5.0;
    CHECK(forward_z(bb, batch) == z0);
    batch.null_cond[0] = 0;
    CHECK_FALSE(forward_z(bb, batch) == z0);
}

TEST_CASE("layouts without conditions") {
    Rng rng(7);
    nn::ParameterStore store;
    const auto cfg = small_config();
    Backbone bb(store, cfg, rng);
    const auto batch = random_batch(cfg, kDefaultPolicy, 2, rng, SegmentLayout(0, 0, 4));
    const Mat z = forward_z(bb, batch);
    CHECK(z.rows() == 8);
    CHECK(nn::all_finite(z));
}

TEST_CASE("parameter gradient matches finite differences") {
    Rng rng(8);
    nn::ParameterStore store;
    const auto cfg = small_config();
    Backbone bb(store, cfg, rng);
    const auto batch = random_batch(cfg, kDefaultPolicy, 2, rng);
    Mat w(8, 8);
    std::normal_distribution<double> n;
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
    auto loss_value = [&] {
        nn::Graph g(false);
        return (g.value(bb.forward(g, batch).z).array() * w.array()).sum();
    };
    nn::Graph g;
    const Var z = bb.forward(g, batch).z;
    store.zero_grad();
    g.backward(nn::weighted_sum(g, z, w));

    std::uniform_int_distribution<std::size_t> pick_param(0, store.all().size() - 1);
    int checked = 0;
    for (auto& p : store.all()) {
        for (Eigen::Index j = 0; j < std::min<Eigen::Index>(p.value.size(), 3); ++j) {
            const double keep = p.value.data()[j];
            const double h = 1e-6;
            p.value.data()[j] = keep + h;
            const double up = loss_value();
            p.value.data()[j] = keep - h;
            const double down = loss_value();
            p.value.data()[j] = keep;
            const double numeric = (up - down) / (2 * h);
            CHECK(p.grad.data()[j] == doctest::Approx(numeric).epsilon(1e-5).scale(1.0));
            ++checked;
        }
    }
    CHECK(checked > 50);
}

TEST_CASE("batch validation") {
    Rng rng(9);
    const auto cfg = small_config();
    auto batch = random_batch(cfg, kDefaultPolicy, 1, rng);
    CHECK_NOTHROW(batch.validate(cfg));
    batch.text_ids[0] = cfg.text_vocab_size;
    CHECK_THROWS_AS(batch.validate(cfg), std::out_of_range);
    batch = random_batch(cfg, kDefaultPolicy, 1, rng);
    batch.visible.pop_back();
    CHECK_THROWS_AS(batch.validate(cfg), std::invalid_argument);

    BackboneConfig bad = cfg;
    bad.heads = 3;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
