#pragma once
// Cross-model functional overlap of steering targets: consensus sets,
// signature vectors, categorical profiles and their layer-level comparison.
// Comparisons are basis-free; feature indices are never joined across models.

#include "saesteer/feature_select.hpp"

#include <json.hpp>

namespace saesteer {

enum class direction { suppress, boost };

inline std::string_view name(direction d) { return d == direction::suppress ? "suppress" : "boost"; }

using vec4 = std::array<double, 4>;

inline constexpr std::size_t default_consensus_size = 100;

struct consensus_set {
    std::string model;
    int layer = 0;
    direction dir = direction::suppress;
    std::vector<std::size_t> features;
};

// Interleave FF, MF, WL, WS rank by rank (exhausted lists drop out), keep
// the first occurrence of each feature, truncate at n. A repeat still uses
// its list's turn: FF=[1,2], WL=[1,6] gives 1, 2, 6 rather than 1, 6, 2.
inline consensus_set consensus_merge(const ranked_feature_lists &lists, direction dir, std::size_t n) {
    consensus_set c;
    c.layer = lists.layer;
    c.dir = dir;
    const auto &src = dir == direction::suppress ? lists.suppress : lists.boost;
    std::size_t depth = 0;
    for (const auto &l : src) depth = std::max(depth, l.size());
    std::set<std::size_t> seen;
    for (std::size_t r = 0; r < depth && c.features.size() < n; ++r)
        for (std::size_t t = 0; t < 4 && c.features.size() < n; ++t)
            if (r < src[t].size() && seen.insert(src[t][r]).second) c.features.push_back(src[t][r]);
    return c;
}

struct census_summary {
    vec4 signature{};
    vec4 profile{};
    std::size_t valid = 0; // V
    std::size_t size = 0;  // consensus set size
};

// Signature: mean member delta. Profile: share of members whose largest
// direction-consistent |delta| falls on each type, over the V members that
// have one; ties go to the earlier type.
inline census_summary summarize(const std::vector<std::size_t> &members, const causal_delta_table &table,
                                direction dir) {
    census_summary s;
    s.size = members.size();
    for (auto j : members) {
        auto it = table.rows.find(j);
        if (it == table.rows.end()) throw data_error("no delta row for consensus feature " + std::to_string(j));
        const auto &d = it->second;
        for (std::size_t t = 0; t < 4; ++t) s.signature[t] += d[t];
        std::optional<std::size_t> best;
        for (std::size_t t = 0; t < 4; ++t) {
            const bool consistent = dir == direction::suppress ? d[t] < 0 : d[t] > 0;
            if (consistent && (!best || std::abs(d[t]) > std::abs(d[*best]))) best = t;
        }
        if (best) {
            s.profile[*best] += 1.0;
            ++s.valid;
        }
    }
    if (!members.empty())
        for (auto &v : s.signature) v /= double(members.size());
    if (s.valid)
        for (auto &v : s.profile) v /= double(s.valid);
    return s;
}

inline double signature_cosine(const vec4 &a, const vec4 &b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t t = 0; t < 4; ++t) {
        ab += a[t] * b[t];
        aa += a[t] * a[t];
        bb += b[t] * b[t];
    }
    if (aa == 0 || bb == 0) throw data_error("signature cosine of a zero vector");
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

// Ruzicka similarity: sum of componentwise minima over sum of maxima.
inline double weighted_jaccard(const vec4 &a, const vec4 &b) {
    double lo = 0, hi = 0;
    for (std::size_t t = 0; t < 4; ++t) {
        if (a[t] < 0 || b[t] < 0) throw data_error("weighted Jaccard needs non-negative profiles");
        lo += std::min(a[t], b[t]);
        hi += std::max(a[t], b[t]);
    }
    if (hi == 0) throw data_error("weighted Jaccard of two all-zero profiles");
    return lo / hi;
}

// ---------------------------------------------------------------------------

struct model_census {
    std::map<int, census_summary> suppress;
    std::map<int, census_summary> boost;
};

inline model_census census_of(const std::map<int, causal_delta_table> &tables, std::size_t n) {
    model_census m;
    for (const auto &[layer, table] : tables) {
        const auto lists = build_ranked_lists(table);
        for (auto dir : {direction::suppress, direction::boost}) {
            const auto set = consensus_merge(lists, dir, n);
            (dir == direction::suppress ? m.suppress : m.boost)[layer] = summarize(set.features, table, dir);
        }
    }
    return m;
}

struct census_options {
    bootstrap_options boot;
    bool paired_difference = false;
};

struct layer_similarity {
    int layer = 0;
    double jaccard = 0;
    double cosine = 0;
    std::size_t n_a = 0, n_b = 0;
    std::size_t valid_a = 0, valid_b = 0;
};

struct direction_report {
    std::vector<layer_similarity> layers;
    double mean_jaccard = 0;
    double mean_cosine = 0;
    interval jaccard_ci;
    interval cosine_ci;
};

struct census_comparison {
    direction_report suppress;
    direction_report boost;
    std::optional<paired_bootstrap_result> jaccard_difference; // boost minus suppress
    std::optional<paired_bootstrap_result> cosine_difference;
    std::vector<std::string> warnings;
};

inline constexpr std::size_t min_layers_for_stable_ci = 10;

inline interval layer_ci(const std::vector<double> &values, const bootstrap_options &opt) {
    return percentile_interval(bootstrap_means(values, opt), opt.confidence);
}

inline direction_report compare_direction(const std::map<int, census_summary> &a,
                                          const std::map<int, census_summary> &b, const bootstrap_options &opt) {
    std::vector<int> la, lb;
    for (const auto &[l, _] : a) la.push_back(l);
    for (const auto &[l, _] : b) lb.push_back(l);
    if (la != lb) throw data_error("layer mismatch between the two models");
    if (la.empty()) throw data_error("census needs at least one layer");
    direction_report r;
    std::vector<double> jac, cos;
    for (int l : la) {
        const auto &sa = a.at(l);
        const auto &sb = b.at(l);
        layer_similarity s;
        s.layer = l;
        s.n_a = sa.size;
        s.n_b = sb.size;
        s.valid_a = sa.valid;
        s.valid_b = sb.valid;
        try {
            s.jaccard = weighted_jaccard(sa.profile, sb.profile);
            s.cosine = signature_cosine(sa.signature, sb.signature);
        } catch (const data_error &e) {
            throw data_error("layer " + std::to_string(l) + ": " + e.what());
        }
        jac.push_back(s.jaccard);
        cos.push_back(s.cosine);
        r.layers.push_back(s);
    }
    for (double v : jac) r.mean_jaccard += v;
    for (double v : cos) r.mean_cosine += v;
    r.mean_jaccard /= double(jac.size());
    r.mean_cosine /= double(cos.size());
    r.jaccard_ci = layer_ci(jac, opt);
    r.cosine_ci = layer_ci(cos, opt);
    return r;
}

inline census_comparison census_report(const model_census &a, const model_census &b, const census_options &opt = {}) {
    census_comparison c;
    c.suppress = compare_direction(a.suppress, b.suppress, opt.boot);
    c.boost = compare_direction(a.boost, b.boost, opt.boot);
    if (c.suppress.layers.size() < min_layers_for_stable_ci)
        c.warnings.push_back("bootstrap over " + std::to_string(c.suppress.layers.size()) +
                             " layer values; intervals are coarse");
    auto undersized = [](const direction_report &r) {
        return std::any_of(r.layers.begin(), r.layers.end(), [](const layer_similarity &l) {
            return l.n_a < default_consensus_size || l.n_b < default_consensus_size;
        });
    };
    if (undersized(c.suppress) || undersized(c.boost))
        c.warnings.push_back("undersized consensus sets present (fewer than N features passed)");
    if (opt.paired_difference) {
        if (c.suppress.layers.size() < 2) throw data_error("paired difference needs at least 2 layers");
        std::vector<double> sj, bj, sc, bc;
        for (std::size_t i = 0; i < c.suppress.layers.size(); ++i) {
            sj.push_back(c.suppress.layers[i].jaccard);
            bj.push_back(c.boost.layers[i].jaccard);
            sc.push_back(c.suppress.layers[i].cosine);
            bc.push_back(c.boost.layers[i].cosine);
        }
        c.jaccard_difference = paired_bootstrap(sj, bj, opt.boot);
        c.cosine_difference = paired_bootstrap(sc, bc, opt.boot);
    }
    return c;
}

inline void to_json(nlohmann::json &j, const direction_report &r) {
    j = nlohmann::json::object();
    j["per_layer"] = nlohmann::json::array();
    for (const auto &l : r.layers)
        j["per_layer"].push_back({{"layer", l.layer},
                                  {"w_jaccard", l.jaccard},
                                  {"cosine", l.cosine},
                                  {"n_a", l.n_a},
                                  {"n_b", l.n_b},
                                  {"V_a", l.valid_a},
                                  {"V_b", l.valid_b}});
    j["w_jaccard"] = r.mean_jaccard;
    j["w_jaccard_ci"] = {r.jaccard_ci.low, r.jaccard_ci.high};
    j["cosine"] = r.mean_cosine;
    j["cosine_ci"] = {r.cosine_ci.low, r.cosine_ci.high};
}

inline void to_json(nlohmann::json &j, const census_comparison &c) {
    j = {{"suppress", c.suppress}, {"boost", c.boost}, {"warnings", c.warnings}};
    if (c.jaccard_difference) j["boost_minus_suppress_w_jaccard"] = *c.jaccard_difference;
    if (c.cosine_difference) j["boost_minus_suppress_cosine"] = *c.cosine_difference;
}

} // namespace saesteer
