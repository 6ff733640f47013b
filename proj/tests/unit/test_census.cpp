#include "../support/helpers.hpp"

#include <gtest/gtest.h>

using namespace saesteer;

namespace {

ranked_feature_lists suppress_lists(std::array<std::vector<std::size_t>, 4> s) {
    ranked_feature_lists l;
    l.suppress = std::move(s);
    return l;
}

causal_delta_table table_of(std::map<std::size_t, delta_vector> rows) {
    causal_delta_table t;
    t.screen_size = 10;
    t.rows = std::move(rows);
    return t;
}

bootstrap_options exhaustive() {
    bootstrap_options o;
    o.exhaustive = true;
    return o;
}

census_summary summary(vec4 sig, vec4 prof, std::size_t n = 100) {
    census_summary s;
    s.signature = sig;
    s.profile = prof;
    s.size = n;
    s.valid = n;
    return s;
}

} // namespace

TEST(ConsensusMerge, RoundRobinFirstOccurrenceWins) {
    const auto c = consensus_merge(suppress_lists({{{1, 2, 3}, {4, 2, 5}, {1, 6}, {7}}}), direction::suppress, 10);
    EXPECT_EQ(c.features, (std::vector<std::size_t>{1, 4, 7, 2, 6, 3, 5}));
    const auto capped = consensus_merge(suppress_lists({{{1, 2, 3}, {4, 2, 5}, {1, 6}, {7}}}), direction::suppress, 4);
    EXPECT_EQ(capped.features, (std::vector<std::size_t>{1, 4, 7, 2}));
}

TEST(ConsensusMerge, SingleAndEmptyLists) {
    EXPECT_EQ(consensus_merge(suppress_lists({{{}, {9, 3}, {}, {}}}), direction::suppress, 10).features,
              (std::vector<std::size_t>{9, 3}));
    EXPECT_TRUE(consensus_merge(suppress_lists({}), direction::suppress, 10).features.empty());
    // Boost direction reads the boost lists only.
    EXPECT_TRUE(consensus_merge(suppress_lists({{{1}, {}, {}, {}}}), direction::boost, 10).features.empty());
}

TEST(Summarize, SignatureAndProfile) {
    const auto t = table_of({{0, {-0.2, 0, 0, 0}}, {1, {-0.4, 0, 0, 0}}});
    const auto s = summarize({0, 1}, t, direction::suppress);
    EXPECT_NEAR(s.signature[0], -0.3, 1e-15);
    EXPECT_EQ(s.profile, (vec4{1, 0, 0, 0}));
    EXPECT_EQ(s.valid, 2u);
}

TEST(Summarize, InconsistentMemberLeavesProfile) {
    const auto t = table_of({{0, {-0.2, 0, 0, 0}}, {1, {0.1, 0.3, 0, 0}}});
    const auto s = summarize({0, 1}, t, direction::suppress);
    EXPECT_EQ(s.valid, 1u);
    EXPECT_EQ(s.size, 2u);
    EXPECT_EQ(s.profile, (vec4{1, 0, 0, 0}));
    EXPECT_NEAR(s.signature[0], -0.05, 1e-15);
}

TEST(Summarize, ArgmaxOverConsistentComponents) {
    const auto t = table_of({{0, {-0.1, 0.3, 0, 0}}, {1, {0.2, -0.05, -0.2, 0}}});
    EXPECT_EQ(summarize({0, 1}, t, direction::suppress).profile, (vec4{0.5, 0, 0.5, 0}));
    // Boost direction looks at the positive parts instead.
    EXPECT_EQ(summarize({0, 1}, t, direction::boost).profile, (vec4{0.5, 0.5, 0, 0}));
}

TEST(Summarize, MissingRowIsDataError) {
    EXPECT_THROW(summarize({5}, table_of({}), direction::suppress), data_error);
}

TEST(Similarity, CosineCases) {
    EXPECT_DOUBLE_EQ(signature_cosine({1, 2, 0, 0}, {2, 4, 0, 0}), 1.0);
    EXPECT_DOUBLE_EQ(signature_cosine({1, 2, 0, 0}, {-1, -2, 0, 0}), -1.0);
    EXPECT_DOUBLE_EQ(signature_cosine({1, 0, 0, 0}, {0, 1, 0, 0}), 0.0);
    EXPECT_THROW(signature_cosine({0, 0, 0, 0}, {1, 0, 0, 0}), data_error);
}

TEST(Similarity, RuzickaCases) {
    EXPECT_EQ(weighted_jaccard({0.25, 0.25, 0.5, 0}, {0.25, 0.25, 0.5, 0}), 1.0);
    EXPECT_EQ(weighted_jaccard({1, 0, 0, 0}, {0, 1, 0, 0}), 0.0);
    EXPECT_DOUBLE_EQ(weighted_jaccard({0.5, 0.5, 0, 0}, {0, 0.5, 0.5, 0}), 1.0 / 3.0);
    EXPECT_THROW(weighted_jaccard({0, 0, 0, 0}, {0, 0, 0, 0}), data_error);
    EXPECT_THROW(weighted_jaccard({-0.1, 0, 0, 0}, {1, 0, 0, 0}), data_error);
    // One empty profile against a populated one is legitimately zero.
    EXPECT_EQ(weighted_jaccard({0, 0, 0, 0}, {1, 0, 0, 0}), 0.0);
}

// Oracles: exact enumeration of all 4^4 resamples of the layer values,
// linear interpolation at 0.025 and 0.975.
TEST(LayerCi, ExhaustiveFourLayers) {
    const auto a = layer_ci({1, 0.5, 0.25, 0.75}, exhaustive());
    EXPECT_NEAR(a.low, 3.0 / 8.0, 1e-12);
    EXPECT_NEAR(a.high, 7.0 / 8.0, 1e-12);
    const auto b = layer_ci({0.125, 0.5, 0.0625, 0.25}, exhaustive());
    EXPECT_NEAR(b.low, 3.0 / 32.0, 1e-12);
    EXPECT_NEAR(b.high, 13.0 / 32.0, 1e-12);
}

TEST(CensusReport, IdenticalModelsScoreOne) {
    model_census m;
    for (int l = 0; l < 12; ++l) {
        m.suppress[l] = summary({-0.1 * (l + 1), -0.2, 0, 0}, {0.75, 0.25, 0, 0});
        m.boost[l] = summary({0, 0.3, 0.1, 0}, {0, 0.5, 0.5, 0});
    }
    const auto r = census_report(m, m);
    EXPECT_DOUBLE_EQ(r.suppress.mean_jaccard, 1.0);
    EXPECT_DOUBLE_EQ(r.boost.mean_cosine, 1.0);
    EXPECT_EQ(r.suppress.jaccard_ci.low, 1.0);
    EXPECT_EQ(r.suppress.jaccard_ci.high, 1.0);
    EXPECT_NEAR(r.suppress.cosine_ci.low, 1.0, 1e-12);
    EXPECT_TRUE(r.warnings.empty());
}

TEST(CensusReport, LayerMismatch) {
    model_census a, b;
    a.suppress[8] = a.boost[8] = summary({-1, 0, 0, 0}, {1, 0, 0, 0});
    b.suppress[9] = b.boost[9] = summary({-1, 0, 0, 0}, {1, 0, 0, 0});
    try {
        census_report(a, b);
        FAIL();
    } catch (const data_error &e) {
        EXPECT_STREQ(e.what(), "layer mismatch between the two models");
    }
}

TEST(CensusReport, WarnsOnFewLayersAndSmallSets) {
    model_census a;
    for (int l : {8, 16, 24}) {
        a.suppress[l] = summary({-1, 0, 0, 0}, {1, 0, 0, 0}, 40);
        a.boost[l] = summary({0, 1, 0, 0}, {0, 1, 0, 0});
    }
    const auto r = census_report(a, a);
    ASSERT_EQ(r.warnings.size(), 2u);
    EXPECT_NE(r.warnings[0].find("3 layer values"), std::string::npos);
    EXPECT_NE(r.warnings[1].find("undersized"), std::string::npos);
}

TEST(CensusReport, PairedDifferenceOnIdenticalLayers) {
    model_census m;
    for (int l = 0; l < 4; ++l) {
        m.suppress[l] = summary({-1, 0, 0, 0}, {1, 0, 0, 0});
        m.boost[l] = summary({0, 1, 0, 0}, {0, 1, 0, 0});
    }
    census_options opt;
    opt.paired_difference = true;
    const auto r = census_report(m, m, opt);
    ASSERT_TRUE(r.jaccard_difference);
    EXPECT_EQ(r.jaccard_difference->mean_delta, 0.0);
    const auto j = nlohmann::json(r);
    EXPECT_TRUE(j.contains("boost_minus_suppress_w_jaccard"));
    EXPECT_EQ(j["suppress"]["per_layer"].size(), 4u);
}

// Twin worlds share guards (boost side) but differ in their fabricating
// drivers (suppress side), so boost overlap should exceed suppress overlap.
TEST(CensusReport, TwinWorldsBoostOverlapExceedsSuppress) {
    census_options opt;
    opt.boot.resamples = 2000;
    const auto r = testing_support::twin_census(1, {0, 1, 2, 3}, opt);
    EXPECT_GT(r.report.boost.mean_jaccard, r.report.suppress.mean_jaccard);
    EXPECT_GT(r.report.boost.mean_cosine, r.report.suppress.mean_cosine);
    for (const auto &l : r.report.suppress.layers) EXPECT_GT(l.valid_a, 0u);
}
