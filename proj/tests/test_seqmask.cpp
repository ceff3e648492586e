#include "selfctl/seqmask.hpp"

#include "doctest.h"

#include <random>
#include <stdexcept>

using namespace selfctl;

namespace {

// Per-pair rule written out longhand, independent of build_attention_mask.
bool rule(std::size_t t, std::size_t c, std::size_t g, const AttentionPolicy& p, std::size_t q, std::size_t k) {
    (void)g;
    auto seg = [&](std::size_t i) { return i < t ? 0 : (i < t + c ? 1 : 2); };
    const int sq = seg(q), sk = seg(k);
    if (sq == sk) {
        const IntraMode m = sq == 0 ? p.text : (sq == 1 ? p.imgcond : p.gen);
        return m == IntraMode::Bidirectional || k <= q;
    }
    return p.cross == IntraMode::Bidirectional || sk < sq;
}

} // namespace

TEST_CASE("default policy on layout 2,1,2") {
    const SegmentLayout layout(2, 1, 2);
    const auto mask = build_attention_mask(layout, kDefaultPolicy);
    CHECK(mask.rows_string() == "10000\n11000\n11100\n11111\n11111\n");
}

TEST_CASE("bidirectional cross lets text see later segments") {
    const AttentionPolicy p{IntraMode::Causal, IntraMode::Bidirectional, IntraMode::Bidirectional,
                            IntraMode::Bidirectional};
    const auto mask = build_attention_mask(SegmentLayout(2, 1, 2), p);
    CHECK(mask.rows_string() == "10111\n11111\n11111\n11111\n11111\n");
}

TEST_CASE("generated-only layout") {
    const auto all = build_attention_mask(SegmentLayout(0, 0, 3), ablation_policy(8));
    CHECK(all.rows_string() == "111\n111\n111\n");
    AttentionPolicy causal_gen = kDefaultPolicy;
    causal_gen.gen = IntraMode::Causal;
    CHECK(build_attention_mask(SegmentLayout(0, 0, 3), causal_gen).rows_string() == "100\n110\n111\n");
}

TEST_CASE("ablation option numbering") {
    // option = 1 + 4*text + 2*image + cross with bidirectional = 1
    for (int o = 1; o <= 8; ++o) {
        const auto p = ablation_policy(o);
        const int bits = (p.text == IntraMode::Bidirectional ? 4 : 0) + (p.imgcond == IntraMode::Bidirectional ? 2 : 0) +
                         (p.cross == IntraMode::Bidirectional ? 1 : 0);
        CHECK(bits + 1 == o);
        CHECK(p.gen == IntraMode::Bidirectional);
        CHECK(ablation_option(p) == o);
    }
    CHECK(ablation_policy(3) == kDefaultPolicy);
    CHECK_THROWS_AS(ablation_policy(0), std::out_of_range);
    CHECK_THROWS_AS(ablation_policy(9), std::out_of_range);
}

TEST_CASE("mask matches the per-pair rule on all small layouts") {
    for (std::size_t t = 0; t <= 3; ++t)
        for (std::size_t c = 0; c <= 3; ++c)
            for (std::size_t g = 1; g <= 3; ++g)
                for (int o = 1; o <= 8; ++o) {
                    const auto p = ablation_policy(o);
                    const auto mask = build_attention_mask(SegmentLayout(t, c, g), p);
                    const std::size_t n = t + c + g;
                    REQUIRE(mask.size() == n);
                    for (std::size_t q = 0; q < n; ++q)
                        for (std::size_t k = 0; k < n; ++k) CHECK(mask.allowed(q, k) == rule(t, c, g, p, q, k));
                }
}

TEST_CASE("diagonal always allowed and causal cross keeps conditions blind to generation") {
    for (int o = 1; o <= 8; ++o) {
        const SegmentLayout layout(3, 2, 4);
        const auto mask = build_attention_mask(layout, ablation_policy(o));
        for (std::size_t i = 0; i < layout.total_len(); ++i) CHECK(mask.allowed(i, i));
        if (ablation_policy(o).cross == IntraMode::Causal)
            for (std::size_t q = 0; q < layout.condition_len(); ++q)
                for (std::size_t k = layout.condition_len(); k < layout.total_len(); ++k) CHECK_FALSE(mask.allowed(q, k));
    }
}

TEST_CASE("layout accessors and errors") {
    const SegmentLayout layout(4, 16, 16);
    CHECK(layout.total_len() == 36);
    CHECK(layout.offset(Segment::ImageCond) == 4);
    CHECK(layout.offset(Segment::Generated) == 20);
    CHECK(layout.segment_of(3) == Segment::Text);
    CHECK(layout.segment_of(20) == Segment::Generated);
    CHECK_THROWS(SegmentLayout(1, 1, 0));
}

TEST_CASE("policy parsing round-trips") {
    for (int o = 1; o <= 8; ++o) CHECK(parse_policy(to_string(ablation_policy(o))) == ablation_policy(o));
    CHECK(parse_policy("c,b,b,c") == kDefaultPolicy);
    CHECK_THROWS(parse_policy("c,b,b"));
    CHECK_THROWS(parse_policy("c,b,x,c"));
    CHECK(parse_intra_mode("Bidirectional") == IntraMode::Bidirectional);
}

TEST_CASE("mask dump format") {
    const SegmentLayout layout(2, 1, 2);
    const auto dump = format_mask_dump(layout, kDefaultPolicy, build_attention_mask(layout, kDefaultPolicy));
    CHECK(dump == "layout=2,1,2 policy=causal,bidirectional,bidirectional,causal\n10000\n11000\n11100\n11111\n11111\n");
}

TEST_CASE("reachability equals boolean matrix power") {
    std::mt19937_64 rng(5);
    std::bernoulli_distribution coin(0.25);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + trial % 7;
        AttentionMask m(n);
        for (std::size_t q = 0; q < n; ++q)
            for (std::size_t k = 0; k < n; ++k) m.set(q, k, coin(rng));
        for (std::size_t depth = 1; depth <= 4; ++depth) {
            // Oracle: integer path counts through depth layers with residual self-loops.
            std::vector<long> cur(n * n, 0);
            for (std::size_t i = 0; i < n; ++i) cur[i * n + i] = 1;
            for (std::size_t d = 0; d < depth; ++d) {
                std::vector<long> next(n * n, 0);
                for (std::size_t q = 0; q < n; ++q)
                    for (std::size_t j = 0; j < n; ++j)
                        if (m.allowed(q, j) || q == j)
                            for (std::size_t k = 0; k < n; ++k) next[q * n + k] += cur[j * n + k] > 0 ? 1 : 0;
                cur = next;
            }
            const auto r = reachability(m, depth);
            for (std::size_t q = 0; q < n; ++q)
                for (std::size_t k = 0; k < n; ++k) CHECK(r.allowed(q, k) == (cur[q * n + k] > 0));
        }
    }
}

TEST_CASE("default policy: conditions unreachable from generation at any depth") {
    const SegmentLayout layout(4, 16, 16);
    const auto r = reachability(build_attention_mask(layout, kDefaultPolicy), 8);
    for (std::size_t q = 0; q < layout.condition_len(); ++q)
        for (std::size_t k = layout.condition_len(); k < layout.total_len(); ++k) CHECK_FALSE(r.allowed(q, k));
    const auto leak = reachability(build_attention_mask(layout, ablation_policy(8)), 1);
    CHECK(leak.allowed(0, layout.total_len() - 1));
}

TEST_CASE("slice and block") {
    const auto mask = build_attention_mask(SegmentLayout(2, 1, 2), kDefaultPolicy);
    CHECK(mask.block(0, 2).rows_string() == "10\n11\n");
    CHECK(mask.slice({0, 2, 4}).rows_string() == "100\n110\n111\n");
}
