#include "../support/helpers.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace saesteer;
using testing_support::random_sae;

namespace {

sae_model identity_sae(std::size_t d) {
    auto m = sae_model::zeros(d, d, d);
    for (std::size_t i = 0; i < d; ++i) {
        m.encoder(i, i) = 1.f;
        m.w_dec[i * d + i] = 1.f;
    }
    return m;
}

bool bit_equal(const std::vector<float> &a, const std::vector<float> &b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

ranked_feature_lists lists_for(int layer) {
    ranked_feature_lists l;
    l.layer = layer;
    return l;
}

struct toy_fixture {
    toy_world world;
    std::vector<toy_study> studies;
    std::unique_ptr<toy_generator> gen;
    std::unique_ptr<toy_oracle> oracle;
    std::unique_ptr<toy_scorer> scorer;
    sae_by_layer saes;

    explicit toy_fixture(toy_config c, std::size_t n = 120) {
        world = generate_world(c);
        studies = make_studies(world, n, 17);
        gen = std::make_unique<toy_generator>(world, studies);
        oracle = std::make_unique<toy_oracle>(*gen);
        scorer = std::make_unique<toy_scorer>(*gen);
        for (int l : c.layers) saes[l] = oracle_sae(world);
    }

    std::array<std::int64_t, 4> errors(const steering_plan &plan) const {
        std::array<std::int64_t, 4> e{};
        for (const auto &g : steer_all(*gen, saes, plan, gen->study_ids(), 1)) {
            const auto c = oracle->count(g);
            for (auto t : steered_error_types) e[index(t)] += c.get(t);
        }
        return e;
    }
};

toy_config ff_world() {
    toy_config c;
    c.drivers = {{error_type::ff, 1}};
    c.guards = {};
    c.repetition = false;
    return c;
}

} // namespace

TEST(EditCode, BoostDoublesWithUnitBeta) {
    const std::vector<float> z = {0.5f, 2.f, 7.3f};
    layer_edits e;
    e.boost = {0};
    e.suppress = {2};
    const auto out = edit_code(std::span<const float>(z), e, 1.0);
    EXPECT_EQ(out, (std::vector<float>{1.f, 2.f, 0.f}));
}

TEST(EditCode, EmptyEditsAreIdentity) {
    const std::vector<float> z = {0.5f, 0.f, 3.f};
    EXPECT_EQ(edit_code(std::span<const float>(z), {}, 1.0), z);
}

TEST(EditCode, SuppressionWinsConflicts) {
    const std::vector<float> z = {1.f, 1.f};
    layer_edits e;
    e.suppress = {1};
    e.boost = {1, 0};
    EXPECT_EQ(edit_code(std::span<const float>(z), e, 1.0), (std::vector<float>{2.f, 0.f}));
}

TEST(EditCode, OutOfRangeIndex) {
    const std::vector<float> z = {1.f, 1.f};
    layer_edits e;
    e.suppress = {2};
    EXPECT_THROW(edit_code(std::span<const float>(z), e, 1.0), data_error);
}

TEST(ResidualUpdate, EmptyEditIsBitExact) {
    rng r(4);
    for (std::uint64_t s = 0; s < 200; ++s) {
        const auto m = random_sae<float>(7, 15, 4, s);
        std::vector<float> h(7);
        for (auto &v : h) v = static_cast<float>(r.normal() * 3);
        for (double alpha : {0.0, 0.3, 1.0}) {
            const auto st = residual_update(m, std::span<const float>(h), {}, alpha, 1.0);
            EXPECT_TRUE(bit_equal(st.output, h));
        }
    }
}

TEST(ResidualUpdate, SingleBoostedAtom) {
    const auto m = identity_sae(3);
    const std::vector<float> h = {1.f, 0.f, 0.f};
    layer_edits e;
    e.boost = {0};
    const auto st = residual_update(m, std::span<const float>(h), e, 0.5, 1.0);
    EXPECT_EQ(st.output, (std::vector<float>{1.5f, 0.f, 0.f}));
}

TEST(ResidualUpdate, AlphaZeroIsIdentity) {
    const auto m = random_sae<float>(5, 9, 3, 2);
    const std::vector<float> h = {1.f, -2.f, 0.5f, 3.f, 0.25f};
    layer_edits e;
    e.suppress = {0, 1, 2, 3};
    e.boost = {4, 5};
    EXPECT_TRUE(bit_equal(residual_update(m, std::span<const float>(h), e, 0.0, 1.0).output, h));
}

TEST(ResidualUpdate, DeltaIsCodeDifferenceThroughDecoder) {
    const auto m = random_sae<double>(6, 10, 10, 8);
    rng r(1);
    std::vector<double> h(6);
    for (auto &v : h) v = r.normal();
    layer_edits e;
    e.suppress = {1, 3};
    e.boost = {2};
    const auto st = residual_update(m, std::span<const double>(h), e, 0.4, 0.5);
    const auto z = encode(m, std::span<const double>(h));
    const auto a = decode(m, std::span<const double>(st.edited_code));
    const auto b = decode(m, std::span<const double>(z));
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(st.output[i], h[i] + 0.4 * (a[i] - b[i]), 1e-12);
}

TEST(BlendUpdate, AlphaZeroAndOne) {
    const auto m = random_sae<float>(5, 9, 3, 2);
    const std::vector<float> h = {1.f, -2.f, 0.5f, 3.f, 0.25f};
    EXPECT_TRUE(bit_equal(blend_update(m, std::span<const float>(h), {}, 0.0, 1.0).output, h));
    const auto full = blend_update(m, std::span<const float>(h), {}, 1.0, 1.0);
    const auto rec = reconstruct(m, std::span<const float>(h));
    for (std::size_t i = 0; i < 5; ++i) EXPECT_FLOAT_EQ(full.output[i], rec[i]);
}

TEST(BlendUpdate, InjectsReconstructionError) {
    std::size_t differing = 0;
    rng r(9);
    for (std::uint64_t s = 0; s < 100; ++s) {
        const auto m = random_sae<float>(6, 12, 2, s);
        std::vector<float> h(6);
        for (auto &v : h) v = static_cast<float>(r.normal());
        const auto rec = reconstruct(m, std::span<const float>(h));
        const bool lossy = rec != h;
        const auto out = blend_update(m, std::span<const float>(h), {}, 0.5, 1.0).output;
        if (lossy) {
            EXPECT_FALSE(bit_equal(out, h));
            ++differing;
        }
    }
    EXPECT_EQ(differing, 100u);
}

TEST(AggregateLists, ConflictResolvedTowardSuppression) {
    auto l = lists_for(16);
    l.suppress[index(error_type::ff)] = {5};
    l.boost[index(error_type::mf)] = {5, 9};
    const auto e = aggregate_lists(l, 10);
    EXPECT_EQ(e.suppress, (std::vector<std::size_t>{5}));
    EXPECT_EQ(e.boost, (std::vector<std::size_t>{9}));
}

TEST(AggregateLists, EmptyAndTruncation) {
    auto l = lists_for(16);
    EXPECT_TRUE(aggregate_lists(l, 5).empty());
    l.suppress[index(error_type::ff)] = {3, 7};
    EXPECT_EQ(aggregate_lists(l, 1).suppress, (std::vector<std::size_t>{3}));
    EXPECT_THROW(aggregate_lists(l, 0), usage_error);
}

TEST(AggregateLists, Selections) {
    auto l = lists_for(8);
    l.suppress[0] = {1, 2};
    l.boost[3] = {4};
    EXPECT_TRUE(aggregate_lists(l, 5, list_selection::suppress_only).boost.empty());
    EXPECT_TRUE(aggregate_lists(l, 5, list_selection::boost_only).suppress.empty());
    EXPECT_EQ(aggregate_lists(l, 5, list_selection::boost_only).boost, (std::vector<std::size_t>{4}));
}

TEST(SteeringPlan, JsonRoundTripAndValidation) {
    steering_plan p;
    p.alpha = 0.2;
    p.k_budget = 20;
    p.layers[16] = {{1, 2}, {3}};
    p.layers[8] = {{}, {7}};
    const nlohmann::json j = p;
    EXPECT_EQ(j.get<steering_plan>(), p);

    auto bad = j;
    bad["alpha"] = 1.5;
    EXPECT_THROW(bad.get<steering_plan>(), data_error);
    bad = j;
    bad["layers"]["16"]["boost"] = {1};
    EXPECT_THROW(bad.get<steering_plan>(), data_error);
    bad = j;
    bad["mode"] = "sideways";
    EXPECT_THROW(bad.get<steering_plan>(), data_error);
    bad = j;
    bad.erase("beta");
    EXPECT_THROW(bad.get<steering_plan>(), data_error);
}

TEST(SteeringPlan, AlphaOutsideGridWarns) {
    steering_plan p;
    p.alpha = 0.3;
    EXPECT_TRUE(p.warnings().empty());
    p.alpha = 0.9;
    EXPECT_EQ(p.warnings().size(), 1u);
    p.alpha = 0.0;
    EXPECT_TRUE(p.warnings().empty());
}

TEST(SteerToy, ZeroAlphaMatchesUnsteered) {
    toy_fixture f(ff_world(), 40);
    steering_plan p;
    p.alpha = 0.0;
    p.layers[16] = {{0, 1, 2}, {3}};
    for (const auto &id : f.gen->study_ids())
        EXPECT_EQ(steer_generation(*f.gen, f.saes, p, id), f.gen->generate(id, {}));
}

TEST(SteerToy, EmptyResidualPlanMatchesUnsteered) {
    toy_fixture f(ff_world(), 40);
    steering_plan p;
    p.alpha = 0.5;
    p.layers[16] = {};
    for (const auto &id : f.gen->study_ids())
        EXPECT_EQ(steer_generation(*f.gen, f.saes, p, id), f.gen->generate(id, {}));
}

TEST(SteerToy, SuppressingFabricationDriverRemovesFalseFindings) {
    toy_fixture f(ff_world());
    const auto driver = f.world.role_atoms(role_kind::driver, error_type::ff).at(0);
    steering_plan none;
    none.alpha = 0.0;
    const auto before = f.errors(none);
    ASSERT_GT(before[0], 0);
    steering_plan p;
    p.alpha = 1.0;
    p.layers[16].suppress = {driver};
    const auto after = f.errors(p);
    EXPECT_EQ(after[0], 0);
}

TEST(SteerToy, MoreLayersReduceAtLeastAsMuch) {
    auto c = ff_world();
    c.drivers = {{error_type::ff, 1}, {error_type::mf, 1}};
    toy_fixture f(c);
    layer_edits e;
    e.suppress = f.world.role_atoms(role_kind::driver);
    std::sort(e.suppress.begin(), e.suppress.end());
    for (double alpha : {0.2, 0.3, 0.5}) {
        steering_plan single, multi;
        single.alpha = multi.alpha = alpha;
        single.layers[16] = e;
        for (int l : {8, 16, 20, 24}) multi.layers[l] = e;
        const auto s = f.errors(single), m = f.errors(multi);
        EXPECT_LE(m[0] + m[1], s[0] + s[1]) << "alpha " << alpha;
    }
}

TEST(SteerToy, PlanChecks) {
    toy_fixture f(ff_world(), 5);
    steering_plan p;
    p.layers[12] = {{1}, {}};
    EXPECT_THROW(steer_all(*f.gen, f.saes, p, f.gen->study_ids(), 1), data_error);
    p.layers.clear();
    p.layers[16] = {{100000}, {}};
    EXPECT_THROW(steer_all(*f.gen, f.saes, p, f.gen->study_ids(), 1), data_error);
}

TEST(GridSearch, ReproducibleAndBaselineFirst) {
    auto c = ff_world();
    c.drivers = {{error_type::ff, 1}, {error_type::mf, 1}};
    toy_fixture f(c, 60);
    std::map<int, ranked_feature_lists> lists;
    for (int l : c.layers) {
        auto rl = lists_for(l);
        rl.suppress[0] = f.world.role_atoms(role_kind::driver, error_type::ff);
        rl.suppress[1] = f.world.role_atoms(role_kind::driver, error_type::mf);
        lists[l] = rl;
    }
    grid_spec spec;
    spec.alphas = {0.1, 0.5};
    spec.k_budgets = {1, 2};
    spec.layer_sets = {{16}, {8, 16, 20, 24}};
    const auto a = grid_search(spec, lists, f.saes, *f.gen, *f.scorer, *f.oracle, f.gen->study_ids());
    spec.threads = 3;
    const auto b = grid_search(spec, lists, f.saes, *f.gen, *f.scorer, *f.oracle, f.gen->study_ids());
    EXPECT_EQ(nlohmann::json(a).dump(), nlohmann::json(b).dump());
    ASSERT_EQ(a.rows.size(), 9u);
    EXPECT_TRUE(a.rows[0].baseline);
    EXPECT_GE(a.best, 1u);
    for (const auto &r : a.rows) EXPECT_LE(r.composite, a.rows[a.best].composite);
    EXPECT_GT(a.rows[a.best].composite, a.rows[0].composite);
}
