#pragma once
// Suppress/boost feature identification: Pearson-correlation ranking, the
// activation-gap prefilter, the single-feature causal screen, and the
// per-error-type ranked lists built from its delta table.

#include "saesteer/activation_store.hpp"
#include "saesteer/generator.hpp"
#include "saesteer/steering.hpp"

#include <json.hpp>

#include <map>
#include <mutex>

namespace saesteer {

using delta_vector = std::array<double, 4>; // (dFF, dMF, dWL, dWS)

struct causal_delta_table {
    int layer = 0;
    std::size_t screen_size = 0; // N
    std::map<std::size_t, delta_vector> rows;
    std::map<std::size_t, std::string> failures;

    void validate(std::optional<std::size_t> dict_size = std::nullopt) const {
        if (screen_size == 0) throw data_error("delta table screen size N must be positive");
        for (const auto &[j, d] : rows) {
            if (dict_size && j >= *dict_size)
                throw data_error("delta table row " + std::to_string(j) + " outside dictionary");
            for (double v : d)
                if (!std::isfinite(v)) throw data_error("non-finite delta for feature " + std::to_string(j));
        }
    }
    friend bool operator==(const causal_delta_table &, const causal_delta_table &) = default;
};

inline void to_json(nlohmann::json &j, const causal_delta_table &t) {
    j = nlohmann::json::object();
    j["layer"] = t.layer;
    j["N"] = t.screen_size;
    j["rows"] = nlohmann::json::object();
    for (const auto &[f, d] : t.rows) j["rows"][std::to_string(f)] = d;
    if (!t.failures.empty()) {
        j["failures"] = nlohmann::json::object();
        for (const auto &[f, why] : t.failures) j["failures"][std::to_string(f)] = why;
    }
}

inline std::size_t parse_feature_key(const std::string &key) {
    if (key.empty() || !std::all_of(key.begin(), key.end(), [](char c) { return c >= '0' && c <= '9'; }))
        throw data_error("feature key '" + key + "' is not a non-negative integer");
    return std::stoul(key);
}

inline void from_json(const nlohmann::json &j, causal_delta_table &t) {
    if (!j.is_object()) throw data_error("delta table must be a JSON object");
    for (const char *k : {"layer", "N", "rows"})
        if (!j.contains(k)) throw data_error(std::string("delta table missing '") + k + "'");
    if (!j.at("layer").is_number_integer() || !j.at("N").is_number_integer())
        throw data_error("delta table layer and N must be integers");
    t.layer = j.at("layer").get<int>();
    t.screen_size = j.at("N").get<std::size_t>();
    t.rows.clear();
    t.failures.clear();
    for (const auto &[key, v] : j.at("rows").items()) {
        if (!v.is_array() || v.size() != 4) throw data_error("delta row " + key + " must have 4 entries");
        delta_vector d{};
        for (std::size_t i = 0; i < 4; ++i) {
            if (!v[i].is_number()) throw data_error("delta row " + key + " has a non-numeric entry");
            d[i] = v[i].get<double>();
        }
        t.rows[parse_feature_key(key)] = d;
    }
    if (j.contains("failures"))
        for (const auto &[key, v] : j.at("failures").items())
            t.failures[parse_feature_key(key)] = v.get<std::string>();
    t.validate();
}

struct ranked_feature_lists {
    int layer = 0;
    std::array<std::vector<std::size_t>, 4> suppress; // indexed by error_type
    std::array<std::vector<std::size_t>, 4> boost;

    const std::vector<std::size_t> &list(bool boost_direction, error_type t) const {
        return boost_direction ? boost[index(t)] : suppress[index(t)];
    }
    friend bool operator==(const ranked_feature_lists &, const ranked_feature_lists &) = default;
};

inline void to_json(nlohmann::json &j, const ranked_feature_lists &l) {
    j = nlohmann::json::object();
    j["layer"] = l.layer;
    nlohmann::json s = nlohmann::json::object(), b = nlohmann::json::object();
    for (auto t : steered_error_types) {
        s[std::string(name(t))] = l.suppress[index(t)];
        b[std::string(name(t))] = l.boost[index(t)];
    }
    j["suppress"] = s;
    j["boost"] = b;
}

inline void from_json(const nlohmann::json &j, ranked_feature_lists &l) {
    if (!j.is_object() || !j.contains("layer") || !j.contains("suppress") || !j.contains("boost"))
        throw data_error("feature-list JSON needs layer, suppress and boost");
    if (!j.at("layer").is_number_integer()) throw data_error("feature-list layer must be an integer");
    l.layer = j.at("layer").get<int>();
    for (const char *dir : {"suppress", "boost"}) {
        const auto &obj = j.at(dir);
        if (!obj.is_object()) throw data_error(std::string("feature-list '") + dir + "' must be an object");
        auto &target = std::string_view(dir) == "suppress" ? l.suppress : l.boost;
        for (auto &v : target) v.clear();
        for (const auto &[key, arr] : obj.items()) {
            const auto t = parse_error_type(key);
            if (!arr.is_array()) throw data_error("feature list " + key + " must be an array");
            std::set<std::size_t> seen;
            for (const auto &f : arr) {
                if (!f.is_number_integer() || f.get<std::int64_t>() < 0)
                    throw data_error("feature list " + key + " must hold non-negative integers");
                const auto idx = f.get<std::size_t>();
                if (!seen.insert(idx).second)
                    throw data_error("duplicate feature " + std::to_string(idx) + " in " + dir + "/" + key);
                target[index(t)].push_back(idx);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Correlation-based ranking.

struct correlation_ranking {
    std::vector<double> r;              // Pearson r per feature
    std::vector<std::size_t> suppress;  // r > 0, most positive first
    std::vector<std::size_t> boost;     // r < 0, most negative first
};

inline double pearson(std::span<const double> x, std::span<const double> y) {
    const std::size_t n = x.size();
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= double(n);
    my /= double(n);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0 || syy == 0) return 0.0;
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// magnitudes[s][j]: per-study feature magnitude; errors[s]: per-study count.
inline correlation_ranking correlation_rank(const std::vector<std::vector<double>> &magnitudes,
                                            std::span<const double> errors) {
    if (magnitudes.size() != errors.size())
        throw data_error("length mismatch: " + std::to_string(magnitudes.size()) + " studies vs " +
                         std::to_string(errors.size()) + " error counts");
    if (magnitudes.size() < 3) throw data_error("correlation ranking needs at least 3 studies");
    const std::size_t D = magnitudes.front().size();
    for (const auto &m : magnitudes)
        if (m.size() != D) throw data_error("length mismatch in per-study feature magnitudes");
    correlation_ranking out;
    out.r.resize(D);
    std::vector<double> col(magnitudes.size());
    for (std::size_t j = 0; j < D; ++j) {
        for (std::size_t s = 0; s < magnitudes.size(); ++s) col[s] = magnitudes[s][j];
        out.r[j] = pearson(col, errors);
        if (out.r[j] > 0) out.suppress.push_back(j);
        if (out.r[j] < 0) out.boost.push_back(j);
    }
    std::stable_sort(out.suppress.begin(), out.suppress.end(), [&](auto a, auto b) { return out.r[a] > out.r[b]; });
    std::stable_sort(out.boost.begin(), out.boost.end(), [&](auto a, auto b) { return out.r[a] < out.r[b]; });
    return out;
}

// Per-type lists from correlation against each error type's counts.
inline ranked_feature_lists correlation_lists(int layer, const std::vector<std::vector<double>> &magnitudes,
                                              const std::vector<error_counts> &counts) {
    ranked_feature_lists lists;
    lists.layer = layer;
    for (auto t : steered_error_types) {
        std::vector<double> e;
        for (const auto &c : counts) e.push_back(c.get(t));
        auto rank = correlation_rank(magnitudes, e);
        lists.suppress[index(t)] = std::move(rank.suppress);
        lists.boost[index(t)] = std::move(rank.boost);
    }
    return lists;
}

// Mean Top-K code per study over its tokens.
template <class T>
std::map<std::string, std::vector<double>> study_mean_codes(const basic_sae_model<T> &sae,
                                                             const activation_shard &shard) {
    std::map<std::string, std::vector<double>> sums;
    std::map<std::string, std::size_t> counts;
    for (std::size_t i = 0; i < shard.size(); ++i) {
        const auto z = encode(sae, shard.row(i), true);
        auto &acc = sums[shard.key(i).study_id];
        if (acc.empty()) acc.assign(sae.dict_size, 0.0);
        for (std::size_t j = 0; j < z.size(); ++j) acc[j] += z[j];
        ++counts[shard.key(i).study_id];
    }
    for (auto &[id, acc] : sums)
        for (auto &v : acc) v /= double(counts[id]);
    return sums;
}

// ---------------------------------------------------------------------------
// Activation-gap prefilter.

inline constexpr std::size_t default_prefilter_keep = 500;

// Features with the largest |mean(top error quartile) - mean(bottom error
// quartile)|, lower index first on ties.
inline std::vector<std::size_t> prefilter(const std::map<std::string, std::vector<double>> &activations,
                                          const std::map<std::string, double> &errors, std::size_t keep) {
    if (activations.empty()) throw data_error("prefilter needs per-study activations");
    const std::size_t D = activations.begin()->second.size();
    if (keep == 0) throw usage_error("prefilter keep must be positive");
    if (keep > D)
        throw usage_error("prefilter keep=" + std::to_string(keep) + " exceeds dictionary size " + std::to_string(D));
    for (const auto &[id, _] : errors)
        if (!activations.count(id)) throw data_error("no activations for study " + id);
    const auto q = quartile_split(errors, sort_direction::descending);
    auto mean_over = [&](const std::vector<std::string> &ids) {
        std::vector<double> m(D, 0.0);
        for (const auto &id : ids) {
            const auto &a = activations.at(id);
            if (a.size() != D) throw data_error("length mismatch in per-study feature magnitudes");
            for (std::size_t j = 0; j < D; ++j) m[j] += a[j];
        }
        for (auto &v : m) v /= double(ids.size());
        return m;
    };
    const auto high = mean_over(q[0]);
    const auto low = mean_over(q[3]);
    std::vector<std::size_t> idx(D);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::vector<double> gap(D);
    for (std::size_t j = 0; j < D; ++j) gap[j] = std::abs(high[j] - low[j]);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return gap[a] > gap[b]; });
    idx.resize(keep);
    return idx;
}

// Screening panel: roughly equal counts from each quality quartile, the
// remainder going to the worst quartile first. `badness` is higher-is-worse.
inline std::vector<std::string> compose_panel(const std::map<std::string, double> &badness, std::size_t n,
                                              std::uint64_t seed) {
    if (n > badness.size()) throw data_error("panel larger than the candidate pool");
    auto quartiles = quartile_split(badness, sort_direction::descending);
    std::array<std::size_t, 4> take{};
    for (std::size_t q = 0; q < 4; ++q) take[q] = n / 4 + (q < n % 4 ? 1 : 0);
    // Shortfall in a small quartile moves to the next-worst one with room.
    for (std::size_t pass = 0; pass < 4; ++pass)
        for (std::size_t q = 0; q < 4; ++q) {
            if (take[q] <= quartiles[q].size()) continue;
            std::size_t extra = take[q] - quartiles[q].size();
            take[q] = quartiles[q].size();
            for (std::size_t o = 0; o < 4 && extra; ++o) {
                const std::size_t room = quartiles[o].size() - std::min(quartiles[o].size(), take[o]);
                const std::size_t add = std::min(room, extra);
                take[o] += add;
                extra -= add;
            }
        }
    std::vector<std::string> panel;
    for (std::size_t q = 0; q < 4; ++q) {
        rng r(mix_seed(seed, q));
        r.shuffle(quartiles[q]);
        panel.insert(panel.end(), quartiles[q].begin(), quartiles[q].begin() + static_cast<std::ptrdiff_t>(take[q]));
    }
    return panel;
}

// Optional panel filter on per-study baseline word-F1.
inline std::vector<std::string> filter_panel_by_word_f1(const std::vector<std::string> &panel,
                                                        const std::map<std::string, double> &word_f1,
                                                        double threshold) {
    std::vector<std::string> out;
    for (const auto &id : panel) {
        auto it = word_f1.find(id);
        if (it == word_f1.end()) throw data_error("no word-F1 for study " + id);
        if (it->second >= threshold) out.push_back(id);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Single-feature causal screen.

enum class ablation_mode { zero, amplify };

inline ablation_mode parse_ablation_mode(std::string_view s) {
    if (s == "zero") return ablation_mode::zero;
    if (s == "amplify") return ablation_mode::amplify;
    throw usage_error("unknown screen mode '" + std::string(s) + "' (expected zero or amplify)");
}

struct screen_options {
    ablation_mode mode = ablation_mode::zero;
    // Amplify mode scales the feature by (1 + amplify_beta).
    double amplify_beta = 1.0;
    std::size_t threads = 1;
};

// Residual edit that removes (or amplifies) one feature at one layer.
template <class T>
hidden_state_hook single_feature_hook(const basic_sae_model<T> &sae, int layer, std::size_t feature,
                                      const screen_options &opt) {
    layer_edits edits;
    (opt.mode == ablation_mode::zero ? edits.suppress : edits.boost).push_back(feature);
    const double beta = opt.amplify_beta;
    return [&sae, layer, edits, beta](int at, std::size_t, std::span<float> h) {
        if (at != layer) return;
        const auto s = residual_update(sae, std::span<const float>(h.data(), h.size()), edits, 1.0, beta);
        std::copy(s.output.begin(), s.output.end(), h.begin());
    };
}

namespace detail {
inline void require_layer(const steerable_generator &gen, int layer) {
    const auto layers = gen.hook_layers();
    if (std::find(layers.begin(), layers.end(), layer) == layers.end())
        throw data_error("hook layer " + std::to_string(layer) + " is not exposed by the generator");
}
} // namespace detail

// For each candidate j: mean over the panel of errors_t(ablated) - errors_t(baseline).
// Baseline decodes run once. A failing oracle call drops that candidate with
// its reason recorded; the rest of the screen continues.
template <class T>
causal_delta_table causal_screen(const basic_sae_model<T> &sae, int layer, const std::vector<std::string> &panel,
                                 const steerable_generator &gen, const error_oracle &oracle,
                                 const std::vector<std::size_t> &candidates, const screen_options &opt = {}) {
    if (panel.empty()) throw data_error("empty screening panel");
    detail::require_layer(gen, layer);
    for (auto j : candidates)
        if (j >= sae.dict_size) throw data_error("candidate feature " + std::to_string(j) + " outside dictionary");

    const std::size_t workers = (gen.thread_safe() && oracle.thread_safe()) ? opt.threads : 1;
    std::vector<error_counts> base(panel.size());
    parallel_for(panel.size(), workers, [&](std::size_t i) { base[i] = oracle.count(gen.generate(panel[i], {})); });

    causal_delta_table table;
    table.layer = layer;
    table.screen_size = panel.size();
    std::vector<std::optional<delta_vector>> rows(candidates.size());
    std::vector<std::string> reasons(candidates.size());
    parallel_for(candidates.size(), workers, [&](std::size_t c) {
        const auto hook = single_feature_hook(sae, layer, candidates[c], opt);
        delta_vector sum{};
        for (std::size_t i = 0; i < panel.size(); ++i) {
            error_counts ablated;
            try {
                ablated = oracle.count(gen.generate(panel[i], hook));
            } catch (const std::exception &e) {
                reasons[c] = "study " + panel[i] + ": " + e.what();
                return;
            }
            for (auto t : steered_error_types)
                sum[index(t)] += double(ablated.get(t)) - double(base[i].get(t));
        }
        for (auto &v : sum) v /= double(panel.size());
        rows[c] = sum;
    });
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        if (rows[c])
            table.rows[candidates[c]] = *rows[c];
        else
            table.failures[candidates[c]] = reasons[c];
    }
    return table;
}

// Eight lists: per type, suppress (delta < 0) and boost (delta > 0), each
// ordered by |delta| descending with lower index first on ties.
inline ranked_feature_lists build_ranked_lists(const causal_delta_table &table) {
    ranked_feature_lists lists;
    lists.layer = table.layer;
    for (auto t : steered_error_types) {
        std::vector<std::pair<double, std::size_t>> neg, pos;
        for (const auto &[j, d] : table.rows) {
            const double v = d[index(t)];
            if (v < 0) neg.push_back({-v, j});
            if (v > 0) pos.push_back({v, j});
        }
        auto order = [](auto &v) {
            std::sort(v.begin(), v.end(), [](const auto &a, const auto &b) {
                return a.first != b.first ? a.first > b.first : a.second < b.second;
            });
        };
        order(neg);
        order(pos);
        for (const auto &[_, j] : neg) lists.suppress[index(t)].push_back(j);
        for (const auto &[_, j] : pos) lists.boost[index(t)].push_back(j);
    }
    return lists;
}

} // namespace saesteer
