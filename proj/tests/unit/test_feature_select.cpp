#include "../support/helpers.hpp"

#include <gtest/gtest.h>

using namespace saesteer;

namespace {

struct toy_setup {
    toy_world world;
    std::vector<toy_study> studies;
    std::unique_ptr<toy_generator> gen;
    std::unique_ptr<toy_oracle> oracle;
    sae_model sae;

    toy_setup(toy_config c, std::size_t n, std::uint64_t seed = 5) {
        world = generate_world(c);
        studies = make_studies(world, n, seed);
        gen = std::make_unique<toy_generator>(world, studies);
        oracle = std::make_unique<toy_oracle>(*gen);
        sae = oracle_sae(world);
    }
};

toy_config one_driver(error_type t) {
    toy_config c;
    c.drivers = {{t, 1}};
    c.guards = {};
    c.repetition = false;
    return c;
}

// Oracle that fails on the first ablated decode of one study.
class flaky_oracle : public error_oracle {
public:
    flaky_oracle(const error_oracle &inner, std::string bad) : inner_(inner), bad_(std::move(bad)) {}
    error_counts count(const generation &g) const override {
        if (g.study_id == bad_ && calls_++ == 1) throw data_error("judge timeout");
        return inner_.count(g);
    }
    bool thread_safe() const override { return false; }

private:
    const error_oracle &inner_;
    std::string bad_;
    mutable int calls_ = 0;
};

} // namespace

TEST(Pearson, PerfectAndDegenerate) {
    const std::vector<double> a = {1, 2, 3, 4}, b = {2, 4, 6, 8}, c = {5, 5, 5, 5};
    EXPECT_DOUBLE_EQ(pearson(a, b), 1.0);
    EXPECT_EQ(pearson(c, a), 0.0);
    const std::vector<double> x = {1, 2, 3}, y = {3, 2, 1};
    EXPECT_DOUBLE_EQ(pearson(x, y), -1.0);
}

TEST(CorrelationRank, OrdersBySign) {
    // Feature 0 tracks errors, feature 1 is constant, feature 2 anti-tracks.
    const std::vector<std::vector<double>> mags = {{1, 3, 9}, {2, 3, 8}, {3, 3, 1}, {4, 3, 0}};
    const std::vector<double> errors = {1, 2, 3, 4};
    const auto r = correlation_rank(mags, errors);
    EXPECT_DOUBLE_EQ(r.r[0], 1.0);
    EXPECT_EQ(r.r[1], 0.0);
    EXPECT_LT(r.r[2], 0.0);
    EXPECT_EQ(r.suppress, (std::vector<std::size_t>{0}));
    EXPECT_EQ(r.boost, (std::vector<std::size_t>{2}));
}

TEST(CorrelationRank, Errors) {
    const std::vector<std::vector<double>> mags = {{1}, {2}, {3}};
    const std::vector<double> two = {1, 2};
    EXPECT_THROW(correlation_rank(mags, two), data_error);
    const std::vector<std::vector<double>> small = {{1}, {2}};
    EXPECT_THROW(correlation_rank(small, two), data_error);
}

TEST(Prefilter, MaximalAndZeroGap) {
    std::map<std::string, std::vector<double>> act;
    std::map<std::string, double> err;
    for (int s = 0; s < 8; ++s) {
        const std::string id = "s" + std::to_string(s);
        const bool high = s < 2;
        act[id] = {0.5, high ? 1.0 : 0.0, 0.25};
        err[id] = high ? 10.0 : double(s);
    }
    const auto keep = prefilter(act, err, 3);
    EXPECT_EQ(keep.front(), 1u);
    EXPECT_EQ(keep, (std::vector<std::size_t>{1, 0, 2}));
    EXPECT_THROW(prefilter(act, err, 4), usage_error);
}

TEST(Prefilter, PlantedDriversSurviveTop50) {
    toy_config c;
    c.hidden_dim = 64;
    c.atom_count = 512;
    c.drivers = {{error_type::ff, 2}, {error_type::mf, 1}};
    c.guards = {};
    c.repetition = false;
    toy_setup t(c, 400);
    std::map<std::string, double> errors;
    for (const auto &id : t.gen->study_ids()) {
        const auto e = t.oracle->count(t.gen->generate(id, {}));
        errors[id] = double(e.ff) + e.mf + e.wl + e.ws;
    }
    const auto shards = collect_activations(*t.gen, t.gen->study_ids(), {16}, 512, 1);
    const auto means = study_mean_codes(t.sae, shards.at(16));
    const auto keep = prefilter(means, errors, 50);

    // Brute-force gap: rank studies by errors (ties by id), average the top
    // and bottom quarters, sort features by |gap|.
    std::vector<std::pair<double, std::string>> ranked;
    for (const auto &[id, e] : errors) ranked.push_back({-e, id});
    std::sort(ranked.begin(), ranked.end());
    const std::size_t n = ranked.size(), q1 = (n + 3) / 4, q4 = (3 * n + 3) / 4;
    std::vector<double> gap(t.sae.dict_size, 0.0);
    for (std::size_t j = 0; j < gap.size(); ++j) {
        double hi = 0, lo = 0;
        for (std::size_t i = 0; i < q1; ++i) hi += means.at(ranked[i].second)[j];
        for (std::size_t i = q4; i < n; ++i) lo += means.at(ranked[i].second)[j];
        gap[j] = std::abs(hi / double(q1) - lo / double(n - q4));
    }
    std::vector<std::size_t> idx(gap.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return gap[a] > gap[b]; });
    idx.resize(50);
    EXPECT_EQ(keep, idx);
    for (auto a : t.world.role_atoms(role_kind::driver))
        EXPECT_NE(std::find(keep.begin(), keep.end(), a), keep.end()) << "driver " << a;
}

TEST(ComposePanel, BalancedAcrossQuartiles) {
    std::map<std::string, double> bad;
    for (int i = 0; i < 40; ++i) bad["s" + std::to_string(100 + i)] = i;
    const auto p = compose_panel(bad, 10, 3);
    EXPECT_EQ(p.size(), 10u);
    const auto q = quartile_split(bad, sort_direction::descending);
    std::array<int, 4> per{};
    for (const auto &id : p)
        for (std::size_t k = 0; k < 4; ++k)
            if (std::find(q[k].begin(), q[k].end(), id) != q[k].end()) ++per[k];
    EXPECT_EQ(per, (std::array<int, 4>{3, 3, 2, 2}));
    EXPECT_EQ(compose_panel(bad, 10, 3), p);
    EXPECT_THROW(compose_panel(bad, 41, 3), data_error);
}

TEST(WordF1Filter, DropsLowStudies) {
    EXPECT_EQ(filter_panel_by_word_f1({"a", "b", "c"}, {{"a", 0.3}, {"b", 0.1}, {"c", 0.5}}, 0.25),
              (std::vector<std::string>{"a", "c"}));
    EXPECT_THROW(filter_panel_by_word_f1({"z"}, {}, 0.1), data_error);
}

TEST(CausalScreen, InactiveFeatureHasZeroDelta) {
    toy_setup t(one_driver(error_type::ff), 30);
    // A zero encoder column never fires.
    auto sae = t.sae;
    for (std::size_t i = 0; i < sae.hidden_dim; ++i) sae.encoder(i, 0) = 0.f;
    const auto table = causal_screen(sae, 16, t.gen->study_ids(), *t.gen, *t.oracle, {0});
    EXPECT_EQ(table.rows.at(0), (delta_vector{0, 0, 0, 0}));
}

TEST(CausalScreen, FabricationDriverHasNegativeFfDelta) {
    toy_setup t(one_driver(error_type::ff), 80);
    const auto driver = t.world.role_atoms(role_kind::driver).at(0);
    const auto bg = t.world.background_atoms();
    std::vector<std::size_t> cands = {bg[0], driver, bg[1]};
    const auto table = causal_screen(t.sae, 16, t.gen->study_ids(), *t.gen, *t.oracle, cands);

    // Brute force: decode with and without the driver's readout removed.
    double expect = 0;
    for (const auto &id : t.gen->study_ids()) {
        const auto base = t.oracle->count(t.gen->generate(id, {}));
        const auto &w = t.world;
        const auto cut = t.gen->generate(id, [&](int layer, std::size_t, std::span<float> h) {
            if (layer != 16) return;
            const double r = w.readout(driver, h);
            if (r <= 0) return;
            const auto a = w.atom(driver);
            for (std::size_t i = 0; i < h.size(); ++i) h[i] = static_cast<float>(h[i] - r * a[i]);
        });
        expect += double(t.oracle->count(cut).ff) - double(base.ff);
    }
    expect /= double(t.studies.size());
    EXPECT_LT(table.rows.at(driver)[0], 0.0);
    EXPECT_NEAR(table.rows.at(driver)[0], expect, 1e-12);
    const auto lists = build_ranked_lists(table);
    EXPECT_EQ(lists.suppress[0].front(), driver);
}

TEST(CausalScreen, SingleStudyPanel) {
    toy_setup t(one_driver(error_type::mf), 60);
    const auto driver = t.world.role_atoms(role_kind::driver).at(0);
    for (const auto &id : t.gen->study_ids()) {
        const auto table = causal_screen(t.sae, 16, {id}, *t.gen, *t.oracle, {driver});
        const auto base = t.oracle->count(t.gen->generate(id, {}));
        const auto abl = t.oracle->count(t.gen->generate(id, single_feature_hook(t.sae, 16, driver, {})));
        EXPECT_EQ(table.rows.at(driver)[1], double(abl.mf) - double(base.mf));
        EXPECT_EQ(table.screen_size, 1u);
    }
}

TEST(CausalScreen, DeterministicAcrossThreads) {
    toy_setup t(one_driver(error_type::ff), 40);
    std::vector<std::size_t> cands(t.sae.dict_size);
    std::iota(cands.begin(), cands.end(), std::size_t{0});
    screen_options one, many;
    many.threads = 4;
    const auto a = causal_screen(t.sae, 16, t.gen->study_ids(), *t.gen, *t.oracle, cands, one);
    const auto b = causal_screen(t.sae, 16, t.gen->study_ids(), *t.gen, *t.oracle, cands, many);
    EXPECT_EQ(a, b);
    EXPECT_EQ(nlohmann::json(a).dump(), nlohmann::json(b).dump());
}

TEST(CausalScreen, OracleFailureIsRecorded) {
    toy_setup t(one_driver(error_type::ff), 10);
    flaky_oracle bad(*t.oracle, t.gen->study_ids().at(3));
    const auto table = causal_screen(t.sae, 16, t.gen->study_ids(), *t.gen, bad, {0, 1});
    EXPECT_EQ(table.rows.count(0), 0u);
    EXPECT_EQ(table.rows.count(1), 1u);
    ASSERT_EQ(table.failures.count(0), 1u);
    EXPECT_NE(table.failures.at(0).find("judge timeout"), std::string::npos);
}

TEST(CausalScreen, BadLayerAndCandidate) {
    toy_setup t(one_driver(error_type::ff), 5);
    EXPECT_THROW(causal_screen(t.sae, 3, t.gen->study_ids(), *t.gen, *t.oracle, {0}), data_error);
    EXPECT_THROW(causal_screen(t.sae, 16, t.gen->study_ids(), *t.gen, *t.oracle, {100000}), data_error);
    EXPECT_THROW(causal_screen(t.sae, 16, {}, *t.gen, *t.oracle, {0}), data_error);
}

TEST(RankedLists, MagnitudeOrderAndEmpty) {
    causal_delta_table t;
    t.layer = 8;
    t.screen_size = 10;
    t.rows[4] = {-0.3, 0, 0, 0};
    t.rows[2] = {-0.1, 0, 0, 0};
    t.rows[9] = {0, 0.2, 0, 0};
    const auto l = build_ranked_lists(t);
    EXPECT_EQ(l.suppress[0], (std::vector<std::size_t>{4, 2}));
    EXPECT_EQ(l.boost[1], (std::vector<std::size_t>{9}));

    causal_delta_table z = t;
    for (auto &[_, d] : z.rows) d = {0, 0, 0, 0};
    const auto e = build_ranked_lists(z);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_TRUE(e.suppress[i].empty());
        EXPECT_TRUE(e.boost[i].empty());
    }
}

TEST(RankedLists, TiesByIndex) {
    causal_delta_table t;
    t.screen_size = 1;
    t.rows[7] = {-0.5, 0, 0, 0};
    t.rows[3] = {-0.5, 0, 0, 0};
    EXPECT_EQ(build_ranked_lists(t).suppress[0], (std::vector<std::size_t>{3, 7}));
}

TEST(DeltaTable, JsonRoundTripAndValidation) {
    causal_delta_table t;
    t.layer = 16;
    t.screen_size = 100;
    t.rows[12] = {-0.25, 0.5, 0, 0.125};
    t.failures[3] = "timeout";
    const nlohmann::json j = t;
    EXPECT_EQ(j.get<causal_delta_table>(), t);
    auto bad = j;
    bad["rows"]["5"] = {1, 2, 3};
    EXPECT_THROW(bad.get<causal_delta_table>(), data_error);
    bad = j;
    bad["N"] = 0;
    EXPECT_THROW(bad.get<causal_delta_table>(), data_error);
    bad = j;
    bad["rows"]["x1"] = {0, 0, 0, 0};
    EXPECT_THROW(bad.get<causal_delta_table>(), data_error);

    const ranked_feature_lists l = build_ranked_lists(t);
    EXPECT_EQ(nlohmann::json(l).get<ranked_feature_lists>().suppress, l.suppress);
}
